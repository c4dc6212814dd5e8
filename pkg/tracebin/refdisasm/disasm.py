import logging
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field

from ..exceptions import DecodeError, InvalidOpcode, TruncatedInstruction
from ..ingest import DisasmView, ViewRecord
from .decoder import ENDBR64, InstClass, decode_len

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeuristicConfig:
    endbr_scan: bool = False
    epilogue_stop: bool = False
    skip_byte_on_invalid: bool = True
    # calls to these offsets are assumed not to return
    noreturn_targets: frozenset = field(default_factory=frozenset)


def _view(name, insts):
    records = [ViewRecord(inst.offset, inst.length, inst.raw) for inst in insts]
    return DisasmView(name, 0, records)


def linear_sweep(image, start, cfg=HeuristicConfig(), origin=0, end=None, source_name='refdisasm-linear'):
    """Decode sequentially from start, the way objdump walks a section"""
    end = origin + len(image) if end is None else end
    pos = start
    decoded = []
    skipped = 0
    while pos < end:
        try:
            inst = decode_len(image, pos, origin)
        except InvalidOpcode:
            if not cfg.skip_byte_on_invalid:
                logger.debug(f"Linear sweep stopped at invalid opcode {pos:#x}")
                break
            skipped += 1
            pos += 1
            continue
        except TruncatedInstruction:
            break
        decoded.append(inst)
        pos += inst.length

    if skipped:
        logger.debug(f"Linear sweep skipped {skipped} undecodable bytes")
    return _view(source_name, decoded)


def find_endbr(image, origin=0):
    hits = []
    index = image.find(ENDBR64)
    while index != -1:
        hits.append(origin + index)
        index = image.find(ENDBR64, index + 1)
    return hits


def _is_pop(inst):
    return 0x58 <= inst.opcode <= 0x5f


class _Descent:
    """Worklist state of one recursive-descent run"""

    def __init__(self, image, cfg, origin):
        self.image = image
        self.cfg = cfg
        self.origin = origin
        self.decoded = {}

    def in_image(self, offset):
        return self.origin <= offset < self.origin + len(self.image)

    def falls_through(self, inst):
        if not inst.falls_through:
            return False
        if inst.inst_class is InstClass.DIRECT_CALL and inst.rel_target in self.cfg.noreturn_targets:
            return False
        return True

    def drain(self, worklist):
        while worklist:
            offset = worklist.pop()
            while self.in_image(offset) and offset not in self.decoded:
                try:
                    inst = decode_len(self.image, offset, self.origin)
                except DecodeError as e:
                    logger.debug(f"Recursive descent stopped: {e}")
                    break
                self.decoded[offset] = inst
                if inst.rel_target is not None and self.in_image(inst.rel_target):
                    worklist.append(inst.rel_target)
                if not self.falls_through(inst):
                    break
                offset = inst.end

    def after_epilogue(self, offset):
        """True when the closest decoded code before offset ends in pop; pop; ret"""
        starts = sorted(self.decoded)
        index = bisect_left(starts, offset) - 1
        if index < 0:
            return False
        ret = self.decoded[starts[index]]
        if ret.inst_class is not InstClass.RETURN or ret.end > offset:
            return False
        ends = {inst.end: inst for inst in self.decoded.values()}
        first = ends.get(ret.offset)
        second = ends.get(first.offset) if first is not None else None
        return first is not None and second is not None and _is_pop(first) and _is_pop(second)


def recursive_descent(image, entries, cfg=HeuristicConfig(), origin=0, source_name='refdisasm-recursive'):
    """Follow direct control flow from entries.

    Indirect targets are never followed. With endbr_scan every endbr64 in
    the image becomes an extra entry once the worklist drains; with
    epilogue_stop hits right behind a pop; pop; ret epilogue are left alone.
    """
    state = _Descent(image, cfg, origin)
    state.drain(deque(entries))

    if cfg.endbr_scan:
        tried = set()
        while True:
            hits = []
            for hit in find_endbr(image, origin):
                if hit in state.decoded or hit in tried:
                    continue
                if cfg.epilogue_stop and state.after_epilogue(hit):
                    continue
                hits.append(hit)
            if not hits:
                break
            tried.update(hits)
            logger.debug(f"endbr scan adds {len(hits)} entries")
            state.drain(deque(hits))

    ordered = [state.decoded[off] for off in sorted(state.decoded)]
    return _view(source_name, ordered)
