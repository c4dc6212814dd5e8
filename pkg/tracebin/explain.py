"""Attribute missed instructions to control flow.

Missed instructions are grouped into runtime basic blocks. A block whose
inbound transfer is itself disassembled correctly is a target error (the
tool saw the branch but not where it goes); otherwise it is a source error.
"""

import csv
import enum
import io
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

from .core import EdgeKind, EdgeRecord, NormAddr
from .exceptions import InconsistentInputs, ReportFormatError

logger = logging.getLogger(__name__)

EXPLAIN_HEADER = ['leader_hex', 'verdict', 'kind', 'src_hex', 'dst_hex', 'missed_count', 'alternatives']


class Verdict(enum.Enum):
    SOURCE_ERROR = 'source_error'
    TARGET_ERROR = 'target_error'


@dataclass(frozen=True)
class Explanation:
    block_leader: NormAddr
    verdict: Verdict
    via_edge: Optional[EdgeRecord]
    missed_inst_count: int
    alternatives: tuple = ()


@dataclass(frozen=True)
class CategoryCounts:
    cbr: int = 0
    indirect: int = 0
    direct: int = 0
    ret: int = 0
    unattributed: int = 0

    def for_kind(self, kind):
        return getattr(self, 'ret' if kind is EdgeKind.RETURN else kind.label)

    def as_dict(self):
        return {
            'cbr': self.cbr,
            'indirect': self.indirect,
            'direct': self.direct,
            'return': self.ret,
            'unattributed': self.unattributed,
        }

    @property
    def total(self):
        return self.cbr + self.indirect + self.direct + self.ret + self.unattributed

    def __add__(self, other):
        return CategoryCounts(
            self.cbr + other.cbr,
            self.indirect + other.indirect,
            self.direct + other.direct,
            self.ret + other.ret,
            self.unattributed + other.unattributed,
        )


def runtime_blocks(trace, module_id):
    """Map every traced loc of a module to the leader of its runtime block.

    A block starts at a traced leader, after a transfer instruction, or
    where the traced instructions stop being contiguous.
    """
    sources = {edge.src for edge in trace.edges}
    block_of = {}
    leader = None
    previous = None
    for rec in trace.sorted_insts():
        if rec.loc.module_id != module_id:
            continue
        if (
            previous is None
            or rec.loc in trace.leaders
            or previous.end != rec.loc.offset
            or previous.loc in sources
        ):
            leader = rec.loc
        block_of[rec.loc] = leader
        previous = rec
    return block_of


def _correct_in_view(loc, trace, view, missed, module_id):
    if loc.module_id != module_id or loc in missed:
        return False
    rec = trace.insts[loc]
    claim = view.get(loc.offset)
    return (
        claim is not None
        and claim.length == rec.length
        and (claim.raw is None or claim.raw == rec.raw)
    )


def explain(trace, view, report):
    missed = report.error_locs()
    unknown = [loc for loc in missed if loc not in trace.insts]
    if unknown:
        raise InconsistentInputs(f"report names {len(unknown)} locations absent from the trace, e.g. {min(unknown)}")

    block_of = runtime_blocks(trace, report.module_id)
    members = defaultdict(list)
    for loc in missed:
        members[block_of[loc]].append(loc)

    inbound = defaultdict(list)
    for edge in trace.edges:
        inbound[edge.dst].append(edge)

    explanations = []
    for leader in sorted(members):
        count = len(members[leader])
        if leader not in missed:
            # the block starts fine and loses sync part way through
            explanations.append(Explanation(min(members[leader]), Verdict.SOURCE_ERROR, None, count))
            continue
        qualifying = sorted(
            (e for e in inbound[leader] if _correct_in_view(e.src, trace, view, missed, report.module_id)),
            key=EdgeRecord.sort_key,
        )
        if qualifying:
            explanations.append(Explanation(leader, Verdict.TARGET_ERROR, qualifying[0], count, tuple(qualifying)))
        else:
            explanations.append(Explanation(leader, Verdict.SOURCE_ERROR, None, count))

    logger.info(
        f"Explained {len(missed)} missed instructions of {report.tool} in {len(explanations)} blocks"
    )
    return explanations


def categorize(explanations):
    counts = defaultdict(int)
    for explanation in explanations:
        if explanation.verdict is Verdict.TARGET_ERROR:
            counts[explanation.via_edge.kind] += explanation.missed_inst_count
        else:
            counts[None] += explanation.missed_inst_count
    return CategoryCounts(
        cbr=counts[EdgeKind.CBR],
        indirect=counts[EdgeKind.INDIRECT],
        direct=counts[EdgeKind.DIRECT],
        ret=counts[EdgeKind.RETURN],
        unattributed=counts[None],
    )


def dumps_csv(explanations):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(EXPLAIN_HEADER)
    for ex in explanations:
        edge = ex.via_edge
        writer.writerow([
            f"{ex.block_leader.offset:x}",
            ex.verdict.value,
            edge.kind.label if edge else '',
            f"{edge.src.offset:x}" if edge else '',
            f"{edge.dst.offset:x}" if edge else '',
            ex.missed_inst_count,
            ';'.join(f"{alt.src.offset:x}:{alt.kind.label}" for alt in ex.alternatives),
        ])
    return out.getvalue()


def _parse_alternatives(field, leader, kinds):
    alternatives = []
    for item in filter(None, field.split(';')):
        src, kind = item.split(':')
        alternatives.append(EdgeRecord(NormAddr(leader.module_id, int(src, 16)), leader, kinds[kind]))
    return tuple(alternatives)


def loads_csv(text, module_id=0):
    kinds = {kind.label: kind for kind in EdgeKind}
    explanations = []
    for lineno, row in enumerate(csv.reader(text.splitlines()), 1):
        if not row or row == EXPLAIN_HEADER:
            continue
        try:
            leader_hex, verdict, kind, src, dst, count, alt_field = row
            leader = NormAddr(module_id, int(leader_hex, 16))
            edge = None
            if kind:
                edge = EdgeRecord(NormAddr(module_id, int(src, 16)), NormAddr(module_id, int(dst, 16)), kinds[kind])
            alternatives = _parse_alternatives(alt_field, leader, kinds)
            if edge is not None and edge not in alternatives:
                raise ValueError(f"edge {src}->{dst} is not among the alternatives")
            explanations.append(Explanation(leader, Verdict(verdict), edge, int(count), alternatives))
        except (KeyError, ValueError) as e:
            raise ReportFormatError(f"line {lineno}: {e}")
    return explanations


def write_explanations(path, explanations):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_csv(explanations))
    logger.info(f"Wrote {len(explanations)} explanations to {path}")
