"""Disassembler output ingestion.

Two input channels produce a DisasmView: the text listing of `objdump -d`
and the line-based interchange format every other tool exports to:

    BASE <hex>
    TOOL <name>            (optional)
    TARGET <name>          (optional)
    <offset-hex> <len-dec> [<bytes-hex>] [# mnemonic]
"""

import logging
import os
import re
from bisect import bisect_left
from dataclasses import dataclass
from typing import Optional

from .exceptions import (
    DuplicateOffset,
    EmptyListing,
    IngestError,
    MalformedLine,
    MalformedRecord,
    MissingBase,
    UnderflowingOffset,
)

logger = logging.getLogger(__name__)

# Image bases some tools add when loading a binary
PRESETS = {
    'ghidra': 0x100000,
    'angr': 0x400000,
    'none': 0,
}

_HEX_PAIRS = re.compile(r'^(?:[0-9a-fA-F]{2})+$')
_HEX = re.compile(r'^[0-9a-fA-F]+$')
_OBJDUMP_ADDR = re.compile(r'^\s*([0-9a-fA-F]+):(.*)$')
_OBJDUMP_LABEL = re.compile(r'^\s*[0-9a-fA-F]+ <.*>:\s*$')
_OBJDUMP_FORMAT = re.compile(r'^(.*):\s+file format\s+\S+')
_FIELD_SPLIT = re.compile(r'\t|\s{2,}')


@dataclass(frozen=True)
class ViewRecord:
    """One instruction a disassembler claims"""
    offset: int
    length: int
    raw: Optional[bytes] = None
    mnemonic: Optional[str] = None

    def __post_init__(self):
        if self.offset < 0:
            raise IngestError(f"negative offset {self.offset}")
        if self.length < 1:
            raise IngestError(f"record at {self.offset:#x} has length {self.length}")
        if self.raw is not None and len(self.raw) != self.length:
            raise IngestError(f"record at {self.offset:#x}: {len(self.raw)} bytes for length {self.length}")

    @property
    def end(self):
        return self.offset + self.length

    def shifted(self, delta):
        return ViewRecord(self.offset + delta, self.length, self.raw, self.mnemonic)

    def claim(self):
        return (self.offset, self.length, self.raw)


class DisasmView:
    """A disassembler's claimed instruction set, keyed by offset.

    Overlapping records are kept; overlapping_pairs() lists them.
    """

    def __init__(self, source_name, declared_base=0, records=(), target=None):
        self.source_name = source_name
        self.declared_base = declared_base
        self.target = target
        self._records = {}
        for rec in records:
            if rec.offset in self._records:
                raise DuplicateOffset(f"{source_name}: two records at offset {rec.offset:#x}")
            self._records[rec.offset] = rec
        self._offsets = sorted(self._records)
        self._max_len = max((r.length for r in self._records.values()), default=0)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return (self._records[off] for off in self._offsets)

    def __contains__(self, offset):
        return offset in self._records

    def __eq__(self, other):
        if not isinstance(other, DisasmView):
            return NotImplemented
        return (
            self.source_name == other.source_name
            and self.declared_base == other.declared_base
            and self.target == other.target
            and self._records == other._records
        )

    def __repr__(self):
        return f"<DisasmView {self.source_name!r} base={self.declared_base:#x} records={len(self)}>"

    @property
    def offsets(self):
        return list(self._offsets)

    def get(self, offset):
        return self._records.get(offset)

    def covering(self, offset):
        """Closest record that starts before offset and spans it, if any"""
        index = bisect_left(self._offsets, offset) - 1
        while index >= 0 and self._offsets[index] > offset - self._max_len:
            rec = self._records[self._offsets[index]]
            if rec.end > offset:
                return rec
            index -= 1
        return None

    def overlapping_pairs(self):
        pairs = []
        widest = None
        for rec in self:
            if widest is not None and widest.end > rec.offset:
                pairs.append((widest.offset, rec.offset))
            if widest is None or rec.end > widest.end:
                widest = rec
        return pairs

    def replace(self, records=None, declared_base=None, source_name=None, target=None):
        return DisasmView(
            source_name if source_name is not None else self.source_name,
            declared_base if declared_base is not None else self.declared_base,
            list(self) if records is None else records,
            target if target is not None else self.target,
        )


def parse_objdump(text, source_name='objdump'):
    """Parse an `objdump -d` style listing.

    Byte columns may be space separated (objdump) or packed; a line with
    bytes but no mnemonic that starts where the previous instruction ends
    continues that instruction.
    """
    entries = []
    target = None

    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped == '...':
            continue
        if stripped.startswith('Disassembly of section') or _OBJDUMP_LABEL.match(line):
            continue
        fmt = _OBJDUMP_FORMAT.match(stripped)
        if fmt:
            target = os.path.basename(fmt.group(1).strip())
            continue

        match = _OBJDUMP_ADDR.match(line)
        if not match:
            raise MalformedLine(lineno, line)
        offset = int(match.group(1), 16)
        fields = _FIELD_SPLIT.split(match.group(2).strip(), maxsplit=1)
        tokens = fields[0].split(' ') if fields[0] else []
        if not tokens or not all(_HEX_PAIRS.match(tok) for tok in tokens):
            raise MalformedLine(lineno, line)
        raw = bytes.fromhex(''.join(tokens))
        mnemonic = fields[1].strip() if len(fields) > 1 and fields[1].strip() else None

        if mnemonic is None and entries and entries[-1][0] + len(entries[-1][1]) == offset:
            entries[-1][1].extend(raw)
            continue
        entries.append([offset, bytearray(raw), mnemonic])

    if not entries:
        raise EmptyListing(f"{source_name}: listing contains no instructions")

    records = [ViewRecord(off, len(raw), bytes(raw), mnem) for off, raw, mnem in entries]
    view = DisasmView(source_name, 0, records, target)
    logger.info(f"Parsed objdump listing: {len(view)} records, {len(view.overlapping_pairs())} overlaps")
    return view


def parse_interchange(text, source_name=None):
    """Parse the interchange format; TOOL overrides source_name"""
    declared_base = None
    target = None
    records = []

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip('\r')
        if not line.strip():
            continue
        if declared_base is None:
            head = line.split()
            if len(head) != 2 or head[0] != 'BASE' or not _HEX.match(head[1]):
                raise MissingBase(f"line {lineno}: expected 'BASE <hex>' header, got {line!r}")
            declared_base = int(head[1], 16)
            continue
        if line.startswith('#'):
            continue
        if line.startswith('TOOL '):
            source_name = line[5:]
            continue
        if line.startswith('TARGET '):
            target = line[7:]
            continue

        body, sep, comment = line.partition('#')
        mnemonic = None
        if sep:
            mnemonic = comment[1:] if comment.startswith(' ') else comment
        fields = body.split()
        if len(fields) not in (2, 3):
            raise MalformedRecord(lineno, f"expected '<offset> <len> [<bytes>]', got {line!r}")
        if not _HEX.match(fields[0]) or not fields[1].isdigit():
            raise MalformedRecord(lineno, f"bad offset or length in {line!r}")
        offset = int(fields[0], 16)
        length = int(fields[1], 10)
        raw = None
        if len(fields) == 3:
            if not _HEX_PAIRS.match(fields[2]):
                raise MalformedRecord(lineno, f"bad bytes field {fields[2]!r}")
            raw = bytes.fromhex(fields[2])
        try:
            records.append(ViewRecord(offset, length, raw, mnemonic))
        except IngestError as e:
            raise MalformedRecord(lineno, str(e))

    if declared_base is None:
        raise MissingBase("interchange input has no BASE header")
    return DisasmView(source_name or '', declared_base, records, target)


def serialize_interchange(view):
    lines = [f"BASE {view.declared_base:x}"]
    if view.source_name:
        lines.append(f"TOOL {view.source_name}")
    if view.target:
        lines.append(f"TARGET {view.target}")
    for rec in view:
        line = f"{rec.offset:x} {rec.length}"
        if rec.raw is not None:
            line += f" {rec.raw.hex()}"
        if rec.mnemonic is not None:
            line += f" # {rec.mnemonic}"
        lines.append(line)
    return '\n'.join(lines) + '\n'


def preset_base(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise IngestError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")


def rebase(view, runtime_module=None, declared_base=None):
    """Shift a view to module-relative offsets.

    declared_base overrides the base the view was read with (tool presets).
    When runtime_module is given, records beyond its text range are logged.
    """
    base = view.declared_base if declared_base is None else declared_base
    shifted = []
    for rec in view:
        if rec.offset < base:
            raise UnderflowingOffset(
                f"{view.source_name}: record at {rec.offset:#x} lies below declared base {base:#x}"
            )
        shifted.append(rec.shifted(-base))

    if runtime_module is not None:
        outside = sum(1 for rec in shifted if rec.end > runtime_module.text_end)
        if outside:
            logger.warning(f"{view.source_name}: {outside} records lie beyond the text of {runtime_module.path}")
    return DisasmView(view.source_name, 0, shifted, view.target)


def read_view(path, fmt='idf', source_name=None):
    with open(path, encoding='utf-8') as f:
        text = f.read()
    if fmt == 'objdump':
        return parse_objdump(text, source_name or 'objdump')
    if fmt == 'idf':
        return parse_interchange(text, source_name)
    raise IngestError(f"unknown view format {fmt!r}")


def write_view(path, view):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(serialize_interchange(view))
    logger.info(f"Wrote view {path}: {len(view)} records")
