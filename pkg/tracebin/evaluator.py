"""Cross-reference a trace against a disassembler's view.

Only traced instructions are judged, so every reported error is a
guaranteed error of the disassembler.
"""

import csv
import enum
import io
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

from .core import InstRecord, NormAddr
from .exceptions import ModuleMismatch, ReportFormatError, TargetMismatch, TracebinError
from .ingest import ViewRecord

logger = logging.getLogger(__name__)

# Half-open, contiguous repair of the published ranges; D has no upper bound
BUCKETS = (
    ('Z', 0, 0),
    ('A', 1, 80),
    ('B', 81, 410),
    ('C', 411, 1009),
    ('D', 1010, None),
)
BUCKET_LABELS = tuple(label for label, _, _ in BUCKETS)


class ErrorKind(enum.Enum):
    MISSING = 'missing'
    MISMATCH = 'mismatch'


@dataclass(frozen=True)
class ErrorRecord:
    loc: NormAddr
    kind: ErrorKind
    traced: InstRecord
    view_claim: Optional[ViewRecord] = None


@dataclass(frozen=True)
class ErrorReport:
    target: str
    tool: str
    errors: tuple
    module_id: int = 0
    traced_count: int = 0
    length_only_count: int = 0

    @property
    def missing_count(self):
        return sum(1 for e in self.errors if e.kind is ErrorKind.MISSING)

    @property
    def mismatch_count(self):
        return sum(1 for e in self.errors if e.kind is ErrorKind.MISMATCH)

    @property
    def total(self):
        return len(self.errors)

    @property
    def bucket(self):
        return bucketize(self.total)

    def error_locs(self):
        return frozenset(e.loc for e in self.errors)

    def summary(self):
        return {
            'target': self.target,
            'tool': self.tool,
            'module': self.module_id,
            'traced': self.traced_count,
            'missing': self.missing_count,
            'mismatch': self.mismatch_count,
            'total': self.total,
            'bucket': self.bucket,
            'length_only': self.length_only_count,
        }


@dataclass(frozen=True)
class ReportDelta:
    a_only: frozenset
    b_only: frozenset
    both: frozenset

    @property
    def is_empty(self):
        return not (self.a_only or self.b_only or self.both)

    def rows(self):
        rows = [(loc, 'a_only') for loc in self.a_only]
        rows += [(loc, 'b_only') for loc in self.b_only]
        rows += [(loc, 'both') for loc in self.both]
        return sorted(rows)


def bucketize(total_errors):
    if total_errors < 0:
        raise ValueError(f"negative error count {total_errors}")
    for label, low, high in BUCKETS:
        if total_errors >= low and (high is None or total_errors <= high):
            return label
    raise AssertionError(f"no bucket for {total_errors}")


def _select_module(trace, module_id):
    if module_id is not None:
        return trace.module(module_id)
    if not trace.modules:
        raise ModuleMismatch("trace has no modules")
    return trace.modules[0]


def evaluate(trace, view, target=None, tool=None, module_id=None):
    """Judge every traced instruction of one module against the view.

    The view must already be rebased to module-relative offsets.
    """
    module = _select_module(trace, module_id)
    module_name = os.path.basename(module.path)
    if view.target and view.target != module_name:
        raise ModuleMismatch(f"view describes {view.target!r} but the trace module is {module_name!r}")

    errors = []
    traced = 0
    length_only = 0
    for rec in trace.sorted_insts():
        if rec.loc.module_id != module.module_id:
            continue
        traced += 1
        claim = view.get(rec.loc.offset)
        if claim is None:
            errors.append(ErrorRecord(rec.loc, ErrorKind.MISSING, rec, view.covering(rec.loc.offset)))
        elif claim.length != rec.length or (claim.raw is not None and claim.raw != rec.raw):
            errors.append(ErrorRecord(rec.loc, ErrorKind.MISMATCH, rec, claim))
        elif claim.raw is None:
            length_only += 1

    report = ErrorReport(
        target=target or view.target or module_name,
        tool=tool or view.source_name or 'unknown',
        errors=tuple(errors),
        module_id=module.module_id,
        traced_count=traced,
        length_only_count=length_only,
    )
    logger.info(
        f"Evaluated {report.tool} on {report.target}: {traced} traced, "
        f"{report.missing_count} missing, {report.mismatch_count} mismatched"
    )
    return report


def diff_reports(a, b):
    if a.target != b.target or a.module_id != b.module_id:
        raise TargetMismatch(f"cannot compare reports for {a.target!r} and {b.target!r}")
    left = a.error_locs()
    right = b.error_locs()
    return ReportDelta(left - right, right - left, left & right)


# Serialization

def _claim_text(claim):
    if claim is None:
        return ''
    raw = claim.raw.hex() if claim.raw is not None else ''
    return f"{claim.offset:x}:{claim.length}:{raw}"


def _parse_claim(text):
    if not text:
        return None
    offset, length, raw = text.split(':')
    return ViewRecord(int(offset, 16), int(length), bytes.fromhex(raw) if raw else None)


def dumps_csv(report):
    out = io.StringIO()
    out.write('# ' + json.dumps(report.summary(), sort_keys=True) + '\n')
    writer = csv.writer(out, lineterminator='\n')
    for e in report.errors:
        writer.writerow([f"{e.loc.offset:x}", e.kind.value, e.traced.length, e.traced.raw.hex(), _claim_text(e.view_claim)])
    return out.getvalue()


def dumps_json(report):
    payload = {
        'summary': report.summary(),
        'errors': [
            {
                'loc': str(e.loc),
                'kind': e.kind.value,
                'traced_len': e.traced.length,
                'traced_bytes': e.traced.raw.hex(),
                'view_claim': None if e.view_claim is None else {
                    'offset': f"{e.view_claim.offset:x}",
                    'len': e.view_claim.length,
                    'bytes': e.view_claim.raw.hex() if e.view_claim.raw is not None else None,
                },
            }
            for e in report.errors
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + '\n'


def _report_from(summary, errors):
    report = ErrorReport(
        target=summary['target'],
        tool=summary['tool'],
        errors=tuple(errors),
        module_id=summary.get('module', 0),
        traced_count=summary.get('traced', 0),
        length_only_count=summary.get('length_only', 0),
    )
    if report.total != summary.get('total', report.total):
        raise ReportFormatError(f"summary says {summary['total']} errors, found {report.total} rows")
    return report


def loads_csv(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith('# '):
        raise ReportFormatError("report is missing its summary line")
    try:
        summary = json.loads(lines[0][2:])
    except ValueError as e:
        raise ReportFormatError(f"bad summary line: {e}")
    module_id = summary.get('module', 0)
    errors = []
    for lineno, row in enumerate(csv.reader(lines[1:]), 2):
        if not row:
            continue
        try:
            loc_hex, kind, length, raw, claim = row
            loc = NormAddr(module_id, int(loc_hex, 16))
            traced = InstRecord(loc, int(length), bytes.fromhex(raw))
            errors.append(ErrorRecord(loc, ErrorKind(kind), traced, _parse_claim(claim)))
        except (ValueError, TypeError, TracebinError) as e:
            raise ReportFormatError(f"line {lineno}: {e}")
    return _report_from(summary, errors)


def loads_json(text):
    try:
        payload = json.loads(text)
        errors = []
        for item in payload['errors']:
            loc = NormAddr.parse(item['loc'])
            traced = InstRecord(loc, item['traced_len'], bytes.fromhex(item['traced_bytes']))
            claim = item['view_claim']
            if claim is not None:
                raw = claim['bytes']
                claim = ViewRecord(int(claim['offset'], 16), claim['len'], bytes.fromhex(raw) if raw is not None else None)
            errors.append(ErrorRecord(loc, ErrorKind(item['kind']), traced, claim))
        return _report_from(payload['summary'], errors)
    except (KeyError, ValueError, TypeError, TracebinError) as e:
        raise ReportFormatError(f"bad JSON report: {e}")


def read_report(path):
    with open(path, encoding='utf-8') as f:
        text = f.read()
    if text.lstrip().startswith('{'):
        return loads_json(text)
    return loads_csv(text)


def write_report(path, report, as_json=False):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_json(report) if as_json else dumps_csv(report))
    logger.info(f"Wrote report {path} ({report.total} errors, bucket {report.bucket})")


def dumps_delta(delta):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(['loc_hex', 'side'])
    for loc, side in delta.rows():
        writer.writerow([f"{loc.offset:x}", side])
    return out.getvalue()
