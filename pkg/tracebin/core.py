"""Domain types shared by every tracebin module.

A TraceSet is the unique instruction trace of one or more runs: the set of
distinct executed instructions keyed by module-relative address, plus the
control-flow edges and basic-block leaders seen at runtime.
"""

import enum
import logging
from dataclasses import dataclass, replace
from types import MappingProxyType

from .exceptions import (
    AmbiguousModule,
    ConflictingInstruction,
    ConflictingModule,
    InvalidTraceSet,
    NoModule,
    OverlappingInstruction,
)

logger = logging.getLogger(__name__)

MAX_INST_LEN = 15
U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class ModuleInfo:
    """One loaded image: where it was mapped and where its code lives"""
    module_id: int
    path: str
    runtime_base: int
    text_start: int
    text_size: int

    def __post_init__(self):
        if self.text_size <= 0:
            raise InvalidTraceSet(f"module {self.module_id} ({self.path}) has empty text range")
        if self.text_start + self.text_size > U64_MAX or self.runtime_base > U64_MAX:
            raise InvalidTraceSet(f"module {self.module_id} ({self.path}) text range overflows 64 bits")

    @property
    def text_end(self):
        return self.text_start + self.text_size

    def contains_raw(self, raw_addr):
        return self.runtime_base <= raw_addr < self.runtime_base + self.text_end

    def with_id(self, module_id):
        return replace(self, module_id=module_id)


@dataclass(frozen=True, order=True)
class NormAddr:
    module_id: int
    offset: int

    def __str__(self):
        return f"{self.module_id}:{self.offset:x}"

    @classmethod
    def parse(cls, text):
        module_id, _, offset = text.partition(':')
        if not offset:
            raise ValueError(f"not a module address: {text!r}")
        return cls(int(module_id, 10), int(offset, 16))


@dataclass(frozen=True)
class InstRecord:
    """An executed instruction: where it ran and the bytes that ran there"""
    loc: NormAddr
    length: int
    raw: bytes

    def __post_init__(self):
        if not 1 <= self.length <= MAX_INST_LEN:
            raise InvalidTraceSet(f"instruction at {self.loc} has length {self.length}")
        if len(self.raw) != self.length:
            raise InvalidTraceSet(f"instruction at {self.loc}: {len(self.raw)} bytes for length {self.length}")

    @property
    def end(self):
        return self.loc.offset + self.length


class EdgeKind(enum.Enum):
    CBR = 'C'
    DIRECT = 'D'
    INDIRECT = 'I'
    RETURN = 'R'

    @property
    def label(self):
        return self.name.lower()


@dataclass(frozen=True)
class EdgeRecord:
    src: NormAddr
    dst: NormAddr
    kind: EdgeKind

    def sort_key(self):
        return (self.src, self.dst, self.kind.value)


@dataclass(frozen=True, eq=False)
class TraceSet:
    """Sound proxy oracle for one binary.

    Build instances with TraceSet.build(), which checks every invariant;
    the fields are read-only views.
    """
    modules: tuple
    insts: MappingProxyType
    edges: frozenset
    leaders: frozenset
    partial: bool = False

    __hash__ = None

    @classmethod
    def build(cls, modules, insts, edges=(), leaders=(), partial=False):
        table = {}
        for rec in insts:
            known = table.get(rec.loc)
            if known is not None and known != rec:
                raise ConflictingInstruction(
                    f"{rec.loc}: {known.raw.hex()} vs {rec.raw.hex()}"
                )
            table[rec.loc] = rec
        trace = cls(
            modules=tuple(sorted(modules, key=lambda m: m.module_id)),
            insts=MappingProxyType(table),
            edges=frozenset(edges),
            leaders=frozenset(leaders),
            partial=partial,
        )
        trace.validate()
        return trace

    def __eq__(self, other):
        if not isinstance(other, TraceSet):
            return NotImplemented
        return (
            self.modules == other.modules
            and dict(self.insts) == dict(other.insts)
            and self.edges == other.edges
            and self.leaders == other.leaders
            and self.partial == other.partial
        )

    def validate(self):
        by_id = {}
        for module in self.modules:
            if module.module_id in by_id:
                raise InvalidTraceSet(f"duplicate module id {module.module_id}")
            by_id[module.module_id] = module

        previous = None
        for rec in self.sorted_insts():
            module = by_id.get(rec.loc.module_id)
            if module is None:
                raise InvalidTraceSet(f"instruction at {rec.loc} references unknown module")
            if rec.end > module.text_end:
                raise InvalidTraceSet(f"instruction at {rec.loc} lies outside the text of {module.path}")
            if previous is not None and previous.loc.module_id == rec.loc.module_id and previous.end > rec.loc.offset:
                raise OverlappingInstruction(f"{previous.loc} (len {previous.length}) overlaps {rec.loc}")
            previous = rec

        for edge in self.edges:
            if edge.src not in self.insts or edge.dst not in self.insts:
                raise InvalidTraceSet(f"edge {edge.src} -> {edge.dst} has an endpoint outside the trace")
        for leader in self.leaders:
            if leader not in self.insts:
                raise InvalidTraceSet(f"leader {leader} is not a traced instruction")

    def module(self, module_id):
        for module in self.modules:
            if module.module_id == module_id:
                return module
        raise NoModule(f"no module with id {module_id}")

    def sorted_insts(self):
        return [self.insts[loc] for loc in sorted(self.insts)]

    def sorted_edges(self):
        return sorted(self.edges, key=EdgeRecord.sort_key)

    def filter_module(self, module_id):
        module = self.module(module_id)
        return TraceSet.build(
            [module],
            [rec for rec in self.insts.values() if rec.loc.module_id == module_id],
            [e for e in self.edges if e.src.module_id == module_id and e.dst.module_id == module_id],
            [leader for leader in self.leaders if leader.module_id == module_id],
            partial=self.partial,
        )

    def __len__(self):
        return len(self.insts)


def normalize(raw_addr, modules):
    """Map a runtime address to (module_id, offset from the module's base)"""
    matches = [m for m in modules if m.contains_raw(raw_addr)]
    if not matches:
        raise NoModule(f"address {raw_addr:#x} is not inside any module's text")
    if len(matches) > 1:
        names = ', '.join(m.path for m in matches)
        raise AmbiguousModule(f"address {raw_addr:#x} falls inside several modules: {names}")
    module = matches[0]
    return NormAddr(module.module_id, raw_addr - module.runtime_base)


def denormalize(addr, modules):
    for module in modules:
        if module.module_id == addr.module_id:
            return module.runtime_base + addr.offset
    raise NoModule(f"no module with id {addr.module_id}")


def filter_module(trace, module_id):
    return trace.filter_module(module_id)


def merge(traces):
    """Union several traces of the same binary into one TraceSet.

    Modules are re-keyed by path; ids stay as they are when every path
    already owns a distinct id, otherwise they are renumbered in
    (smallest id, path) order. The result does not depend on input order.
    """
    traces = list(traces)
    if not traces:
        raise InvalidTraceSet("nothing to merge")

    rank = {}
    ranges = {}
    bases = {}
    for trace in traces:
        for module in trace.modules:
            span = (module.text_start, module.text_size)
            if ranges.setdefault(module.path, span) != span:
                raise ConflictingModule(
                    f"{module.path}: text range {span} disagrees with {ranges[module.path]}"
                )
            rank[module.path] = min(rank.get(module.path, module.module_id), module.module_id)
            bases[module.path] = min(bases.get(module.path, module.runtime_base), module.runtime_base)

    ordered = sorted(rank, key=lambda path: (rank[path], path))
    if len(set(rank.values())) == len(rank):
        new_ids = dict(rank)
    else:
        new_ids = {path: index for index, path in enumerate(ordered)}

    modules = [
        ModuleInfo(new_ids[path], path, bases[path], ranges[path][0], ranges[path][1])
        for path in ordered
    ]

    insts = []
    edges = set()
    leaders = set()
    for trace in traces:
        id_map = {m.module_id: new_ids[m.path] for m in trace.modules}

        def rekey(addr, id_map=id_map):
            return NormAddr(id_map[addr.module_id], addr.offset)

        insts.extend(InstRecord(rekey(rec.loc), rec.length, rec.raw) for rec in trace.insts.values())
        edges.update(EdgeRecord(rekey(e.src), rekey(e.dst), e.kind) for e in trace.edges)
        leaders.update(rekey(leader) for leader in trace.leaders)

    merged = TraceSet.build(modules, insts, edges, leaders, partial=any(t.partial for t in traces))
    logger.debug(f"Merged {len(traces)} traces into {len(merged)} unique instructions")
    return merged


@dataclass(frozen=True)
class TraceOutcome:
    """What one traced run produced.

    signals holds (signal number, NormAddr) for every stop signal the run
    raised inside a retained module, in the order they were seen.
    """
    trace: TraceSet
    exit_code: object = None
    signals: tuple = ()
    skipped: int = 0

    @property
    def partial(self):
        return self.trace.partial

    def signal_at(self, loc):
        return [signo for signo, where in self.signals if where == loc]
