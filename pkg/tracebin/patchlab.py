"""Trojan proofs of concept from disassembly errors.

A patch puts a halting marker (ud2 or int3) on an instruction the
disassembler never saw but the program does execute. If the patched
program reaches the marker while the disassembler's view of the patched
binary still misses it, the disassembler hides executed code.
"""

import enum
import io
import json
import logging
import os
import signal
import tempfile
from dataclasses import dataclass

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile

from .core import NormAddr
from .exceptions import BytesMismatch, EmulationError, NoViableSite, PatchError, TraceFailure, TracerError
from .explain import Verdict as BlockVerdict
from .refdisasm.decoder import ENDBR64

logger = logging.getLogger(__name__)

NOP = b'\x90'
DESYNC_PREFIX = bytes.fromhex('e81f00')


class Marker(enum.Enum):
    UD2 = 'ud2'
    INT3 = 'int3'

    @property
    def raw(self):
        return b'\x0f\x0b' if self is Marker.UD2 else b'\xcc'

    @property
    def signo(self):
        return signal.SIGILL if self is Marker.UD2 else signal.SIGTRAP


class Rationale(enum.Enum):
    TARGET_OF_CBR = 'target_of_cbr'
    TARGET_OF_INDIRECT = 'target_of_indirect'
    TARGET_OF_DIRECT = 'target_of_direct'
    TARGET_OF_RETURN = 'target_of_return'
    SOURCE_ERROR = 'source_error'
    DESYNC_REGION = 'desync_region'

    @classmethod
    def for_explanation(cls, explanation):
        if explanation.verdict is BlockVerdict.TARGET_ERROR:
            return cls(f"target_of_{explanation.via_edge.kind.label}")
        return cls.SOURCE_ERROR


class Verdict(enum.Enum):
    HIDDEN_AND_REACHED = 'hidden_and_reached'
    VISIBLE = 'visible'
    UNREACHED = 'unreached'


@dataclass(frozen=True)
class PatchPlan:
    target_loc: NormAddr
    patch_offset: int
    original_bytes: bytes
    patch_bytes: bytes
    marker: Marker
    rationale: Rationale
    missed_inst_count: int = 0

    def __post_init__(self):
        if len(self.patch_bytes) != len(self.original_bytes):
            raise PatchError("patch and original bytes differ in length")
        at = self.target_loc.offset - self.patch_offset
        if self.patch_bytes[at:at + len(self.marker.raw)] != self.marker.raw:
            raise PatchError(f"marker {self.marker.value} is not at {self.target_loc}")

    @property
    def end(self):
        return self.patch_offset + len(self.patch_bytes)

    def as_dict(self):
        return {
            'target': str(self.target_loc),
            'patch_offset': f"{self.patch_offset:x}",
            'original': self.original_bytes.hex(),
            'patch': self.patch_bytes.hex(),
            'marker': self.marker.value,
            'rationale': self.rationale.value,
            'missed_inst_count': self.missed_inst_count,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            target_loc=NormAddr.parse(data['target']),
            patch_offset=int(data['patch_offset'], 16),
            original_bytes=bytes.fromhex(data['original']),
            patch_bytes=bytes.fromhex(data['patch']),
            marker=Marker(data['marker']),
            rationale=Rationale(data['rationale']),
            missed_inst_count=data.get('missed_inst_count', 0),
        )


def _pick_marker(length, marker):
    if marker is not None:
        return marker if length >= len(marker.raw) else None
    return Marker.UD2 if length >= 2 else Marker.INT3


def _marker_site(leader, missed):
    """The missed instruction to overwrite: the block leader, or the one after an endbr64 pad"""
    rec = missed[leader]
    if rec.raw == ENDBR64:
        following = missed.get(NormAddr(leader.module_id, rec.end))
        if following is not None:
            return following
    return rec


def _executed_bytes(trace, module_id):
    covered = set()
    for rec in trace.insts.values():
        if rec.loc.module_id == module_id:
            covered.update(range(rec.loc.offset, rec.end))
    return covered


def plan(report, explanations, image, marker=None, trace=None, desync=False):
    """Rank patch sites by missed instructions, TARGET_ERROR blocks first on ties.

    With desync=True (needs the trace) sites preceded by three bytes of
    never-executed padding get a DESYNC_REGION plan instead: the padding
    becomes the start of a call whose displacement swallows the marker.
    """
    missed = {e.loc: e.traced for e in report.errors}
    if desync and trace is None:
        raise PatchError("desync plans need the trace to find padding")
    executed = _executed_bytes(trace, report.module_id) if desync else set()

    ranked = sorted(
        explanations,
        key=lambda ex: (-ex.missed_inst_count, ex.verdict is not BlockVerdict.TARGET_ERROR, ex.block_leader),
    )
    plans = []
    for ex in ranked:
        if ex.block_leader not in missed:
            continue
        rec = _marker_site(ex.block_leader, missed)
        offset = rec.loc.offset
        chosen = _pick_marker(rec.length, marker)
        if chosen is None:
            logger.debug(f"{rec.loc}: {rec.length} bytes cannot hold {marker.value}")
            continue
        if bytes(image[offset:rec.end]) != rec.raw:
            logger.warning(f"{rec.loc}: image bytes differ from the traced instruction, skipped")
            continue

        body = chosen.raw + NOP * (rec.length - len(chosen.raw))
        start = offset
        rationale = Rationale.for_explanation(ex)
        if desync and chosen is Marker.UD2 and offset >= len(DESYNC_PREFIX):
            pad = range(offset - len(DESYNC_PREFIX), offset)
            if not any(byte in executed for byte in pad):
                start = pad.start
                body = DESYNC_PREFIX + body
                rationale = Rationale.DESYNC_REGION

        plans.append(PatchPlan(
            target_loc=rec.loc,
            patch_offset=start,
            original_bytes=bytes(image[start:rec.end]),
            patch_bytes=body,
            marker=chosen,
            rationale=rationale,
            missed_inst_count=ex.missed_inst_count,
        ))

    if not plans:
        raise NoViableSite(f"no missed instruction of {report.tool} on {report.target} can hold a marker")
    logger.info(f"Planned {len(plans)} patches for {report.tool} on {report.target}")
    return plans


def _swap(image, offset, expected, replacement):
    current = bytes(image[offset:offset + len(expected)])
    if current != expected:
        raise BytesMismatch(f"expected {expected.hex()} at {offset:#x}, found {current.hex()}")
    patched = bytearray(image)
    patched[offset:offset + len(replacement)] = replacement
    return bytes(patched)


def apply(image, patch):
    return _swap(image, patch.patch_offset, patch.original_bytes, patch.patch_bytes)


def revert(image, patch):
    return _swap(image, patch.patch_offset, patch.patch_bytes, patch.original_bytes)


def module_to_file_offset(elf_bytes, offset):
    """Map a module-relative offset to an offset in the ELF file"""
    try:
        elf = ELFFile(io.BytesIO(elf_bytes))
        loads = [seg for seg in elf.iter_segments() if seg['p_type'] == 'PT_LOAD']
    except ELFError as e:
        raise PatchError(f"cannot read ELF: {e}")
    if not loads:
        raise PatchError("ELF has no load segments")
    link_base = min(seg['p_vaddr'] & ~0xfff for seg in loads)
    vaddr = link_base + offset
    for seg in loads:
        if seg['p_vaddr'] <= vaddr < seg['p_vaddr'] + seg['p_filesz']:
            return seg['p_offset'] + vaddr - seg['p_vaddr']
    raise PatchError(f"module offset {offset:#x} is not backed by file contents")


def apply_to_elf(elf_bytes, patch):
    file_offset = module_to_file_offset(elf_bytes, patch.patch_offset)
    return _swap(elf_bytes, file_offset, patch.original_bytes, patch.patch_bytes)


def live_runner(elf_bytes, args=(), timeout=30):
    from .tracer import RunSpec, collect_outcome

    fd, path = tempfile.mkstemp(suffix='.elf', prefix='tracebin-patched-')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(elf_bytes)
        os.chmod(path, 0o755)
        return collect_outcome(RunSpec(path, tuple(args), timeout_s=timeout))
    finally:
        os.unlink(path)


def emulator_runner(elf_bytes, args=()):
    from .corpus.emulator import run_elf

    return run_elf(elf_bytes, args)


def marker_visible(view, patch):
    rec = view.get(patch.target_loc.offset)
    if rec is None:
        return False
    if rec.raw is None:
        return rec.length == len(patch.marker.raw)
    return rec.raw[:len(patch.marker.raw)] == patch.marker.raw


def verify(patched_elf, view, patch, args=(), runner=None):
    runner = runner or live_runner
    try:
        outcome = runner(patched_elf, args)
    except (TracerError, EmulationError) as e:
        raise TraceFailure(f"could not trace the patched binary: {e}")

    reached = (
        patch.target_loc in outcome.trace.insts
        and int(patch.marker.signo) in outcome.signal_at(patch.target_loc)
    )
    if not reached:
        verdict = Verdict.UNREACHED
    elif marker_visible(view, patch):
        verdict = Verdict.VISIBLE
    else:
        verdict = Verdict.HIDDEN_AND_REACHED
    logger.info(f"Patch at {patch.target_loc}: {verdict.value}")
    return verdict


def dumps_plans(plans):
    return json.dumps([p.as_dict() for p in plans], indent=2) + '\n'


def loads_plans(text):
    try:
        return [PatchPlan.from_dict(item) for item in json.loads(text)]
    except (KeyError, ValueError, TypeError) as e:
        raise PatchError(f"bad patch plan file: {e}")


def read_plans(path):
    with open(path, encoding='utf-8') as f:
        return loads_plans(f.read())


def write_plans(path, plans):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_plans(plans))
    logger.info(f"Wrote {len(plans)} patch plans to {path}")
