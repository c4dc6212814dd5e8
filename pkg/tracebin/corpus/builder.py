"""Hand-assembler for corpus images.

Instructions are given as their exact bytes plus an AT&T style mnemonic;
only branch and rip-relative displacements are computed, once every label
has an offset.
"""

import struct
from dataclasses import dataclass
from typing import Callable, Optional

from ..exceptions import CorpusError
from ..refdisasm.decoder import InstClass, decode_bytes

CONDITIONS = {
    'jo': 0x0, 'jno': 0x1, 'jb': 0x2, 'jae': 0x3, 'je': 0x4, 'jne': 0x5, 'jbe': 0x6, 'ja': 0x7,
    'js': 0x8, 'jns': 0x9, 'jp': 0xa, 'jnp': 0xb, 'jl': 0xc, 'jge': 0xd, 'jle': 0xe, 'jg': 0xf,
}


@dataclass(frozen=True)
class TruthEntry:
    offset: int
    length: int
    raw: bytes
    inst_class: InstClass
    mnemonic: str

    @property
    def end(self):
        return self.offset + self.length


@dataclass(frozen=True)
class BuiltImage:
    image: bytes
    labels: dict
    ground_truth: tuple
    data_regions: tuple


@dataclass
class _Item:
    size: int
    encode: Callable
    mnemonic: Optional[str] = None
    label: Optional[str] = None
    boundary: int = 0
    fill: int = 0xcc

    @property
    def is_code(self):
        return self.mnemonic is not None


def _hex(text):
    return bytes.fromhex(text.replace(' ', ''))


def _rel(value, size, where):
    low, high = (-0x80, 0x7f) if size == 1 else (-0x80000000, 0x7fffffff)
    if not low <= value <= high:
        raise CorpusError(f"displacement {value} does not fit {size} bytes at {where:#x}")
    return value.to_bytes(size, 'little', signed=True)


class ImageBuilder:
    def __init__(self):
        self._items = []

    def label(self, name):
        self._items.append(_Item(0, lambda labels, offset: b'', label=name))
        return self

    def inst(self, mnemonic, encoding):
        raw = _hex(encoding)
        self._items.append(_Item(len(raw), lambda labels, offset: raw, mnemonic))
        return self

    def _relative(self, mnemonic, opcode, target, size, addend):
        opcode = _hex(opcode)
        total = len(opcode) + size

        def encode(labels, offset):
            dest = labels[target] + addend
            return opcode + _rel(dest - (offset + total), size, offset)

        self._items.append(_Item(total, encode, mnemonic))
        return self

    def jmp(self, target, short=False, addend=0):
        text = f"jmp {target}" + (f"+{addend}" if addend else '')
        if short:
            return self._relative(text, 'eb', target, 1, addend)
        return self._relative(text.replace('jmp', 'jmpq'), 'e9', target, 4, addend)

    def branch(self, condition, target, short=True):
        cc = CONDITIONS[condition]
        if short:
            return self._relative(f"{condition} {target}", f"{0x70 | cc:02x}", target, 1, 0)
        return self._relative(f"{condition} {target}", f"0f {0x80 | cc:02x}", target, 4, 0)

    def call(self, target):
        return self._relative(f"callq {target}", 'e8', target, 4, 0)

    def rip(self, mnemonic, prefix, target, suffix=''):
        """An instruction with a rip-relative disp32 pointing at target"""
        prefix = _hex(prefix)
        suffix = _hex(suffix)
        total = len(prefix) + 4 + len(suffix)

        def encode(labels, offset):
            return prefix + _rel(labels[target] - (offset + total), 4, offset) + suffix

        self._items.append(_Item(total, encode, mnemonic))
        return self

    def data(self, raw):
        raw = bytes(raw)
        self._items.append(_Item(len(raw), lambda labels, offset: raw))
        return self

    def rel_table(self, base, targets):
        """int32 entries holding target - base, the way compilers lay out switch tables"""
        def encode(labels, offset):
            return b''.join(struct.pack('<i', labels[t] - labels[base]) for t in targets)

        self._items.append(_Item(4 * len(targets), encode))
        return self

    def align(self, boundary, fill=0xcc):
        self._items.append(_Item(0, None, boundary=boundary, fill=fill))
        return self

    def exit(self, code=0, trap=True):
        """exit(code) through a raw syscall, optionally followed by ud2"""
        self.inst('mov $0x3c,%eax', 'b8 3c 00 00 00')
        if code:
            self.inst(f'mov ${code:#x},%edi', f"bf {code.to_bytes(4, 'little').hex()}")
        else:
            self.inst('xor %edi,%edi', '31 ff')
        self.inst('syscall', '0f 05')
        if trap:
            self.inst('ud2', '0f 0b')
        return self

    def _layout(self):
        labels = {}
        offset = 0
        sizes = []
        for item in self._items:
            if item.boundary:
                size = (-offset) % item.boundary
            else:
                size = item.size
            if item.label is not None:
                if item.label in labels:
                    raise CorpusError(f"label {item.label!r} defined twice")
                labels[item.label] = offset
            sizes.append(size)
            offset += size
        return labels, sizes

    def build(self):
        labels, sizes = self._layout()
        image = bytearray()
        truth = []
        data_regions = []
        for item, size in zip(self._items, sizes):
            offset = len(image)
            if item.boundary:
                chunk = bytes([item.fill]) * size
            else:
                chunk = item.encode(labels, offset)
            if len(chunk) != size:
                raise CorpusError(f"item at {offset:#x} encoded to {len(chunk)} bytes, expected {size}")
            if item.is_code:
                inst = decode_bytes(chunk)
                truth.append(TruthEntry(offset, size, chunk, inst.inst_class, item.mnemonic))
            elif size:
                if data_regions and data_regions[-1][0] + data_regions[-1][1] == offset:
                    start, length = data_regions.pop()
                    data_regions.append((start, length + size))
                else:
                    data_regions.append((offset, size))
            image += chunk
        return BuiltImage(bytes(image), labels, tuple(truth), tuple(data_regions))
