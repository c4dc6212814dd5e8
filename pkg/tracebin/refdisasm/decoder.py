"""x86-64 instruction length decoder for the subset tracebin needs.

The decoder never guesses: anything outside the table raises InvalidOpcode.
Besides length and control-flow class it keeps the ModRM/SIB/displacement/
immediate fields so the corpus interpreter can execute what it decodes.
"""

import enum
from dataclasses import dataclass
from typing import Optional

from ..core import MAX_INST_LEN
from ..exceptions import InvalidOpcode, TruncatedInstruction

LEGACY_PREFIXES = frozenset({0x66, 0x67, 0x2e, 0x3e, 0x26, 0x36, 0x64, 0x65, 0xf0, 0xf2, 0xf3})

ENDBR64 = bytes.fromhex('f30f1efa')


class InstClass(enum.Enum):
    NONE = 'none'
    CBR = 'cbr'
    DIRECT_JMP = 'direct_jmp'
    DIRECT_CALL = 'direct_call'
    INDIRECT = 'indirect'
    RETURN = 'return'
    HALTING = 'halting'


@dataclass(frozen=True)
class _Form:
    modrm: bool = False
    # '', 'b' (1), 'w' (2), 'd' (4), 'z' (2 or 4), 'v' (2, 4 or 8)
    imm: str = ''
    cls: InstClass = InstClass.NONE
    byte_op: bool = False
    # allowed ModRM.reg values, None for any
    regs: Optional[frozenset] = None


def _one_byte_table():
    table = {}
    for base in range(0x00, 0x40, 0x08):
        table[base] = _Form(modrm=True, byte_op=True)
        table[base + 1] = _Form(modrm=True)
        table[base + 2] = _Form(modrm=True, byte_op=True)
        table[base + 3] = _Form(modrm=True)
        table[base + 4] = _Form(imm='b', byte_op=True)
        table[base + 5] = _Form(imm='z')
    for op in range(0x50, 0x60):
        table[op] = _Form()
    table[0x63] = _Form(modrm=True)
    table[0x68] = _Form(imm='z')
    table[0x69] = _Form(modrm=True, imm='z')
    table[0x6a] = _Form(imm='b')
    table[0x6b] = _Form(modrm=True, imm='b')
    for op in range(0x70, 0x80):
        table[op] = _Form(imm='b', cls=InstClass.CBR)
    table[0x80] = _Form(modrm=True, imm='b', byte_op=True)
    table[0x81] = _Form(modrm=True, imm='z')
    table[0x83] = _Form(modrm=True, imm='b')
    for op in range(0x84, 0x8c):
        table[op] = _Form(modrm=True, byte_op=not op & 1)
    table[0x8d] = _Form(modrm=True)
    table[0x8f] = _Form(modrm=True, regs=frozenset({0}))
    for op in range(0x90, 0x9a):
        table[op] = _Form()
    table[0xa8] = _Form(imm='b', byte_op=True)
    table[0xa9] = _Form(imm='z')
    for op in range(0xb0, 0xb8):
        table[op] = _Form(imm='b', byte_op=True)
    for op in range(0xb8, 0xc0):
        table[op] = _Form(imm='v')
    table[0xc0] = _Form(modrm=True, imm='b', byte_op=True)
    table[0xc1] = _Form(modrm=True, imm='b')
    table[0xc2] = _Form(imm='w', cls=InstClass.RETURN)
    table[0xc3] = _Form(cls=InstClass.RETURN)
    table[0xc6] = _Form(modrm=True, imm='b', byte_op=True, regs=frozenset({0}))
    table[0xc7] = _Form(modrm=True, imm='z', regs=frozenset({0}))
    table[0xc9] = _Form()
    table[0xcc] = _Form(cls=InstClass.HALTING)
    for op in range(0xd0, 0xd4):
        table[op] = _Form(modrm=True, byte_op=not op & 1)
    table[0xe8] = _Form(imm='d', cls=InstClass.DIRECT_CALL)
    table[0xe9] = _Form(imm='d', cls=InstClass.DIRECT_JMP)
    table[0xeb] = _Form(imm='b', cls=InstClass.DIRECT_JMP)
    table[0xf4] = _Form(cls=InstClass.HALTING)
    # F6/F7 carry an immediate only for /0 and /1 (test), see _immediate_kind
    table[0xf6] = _Form(modrm=True, byte_op=True)
    table[0xf7] = _Form(modrm=True)
    table[0xfe] = _Form(modrm=True, byte_op=True, regs=frozenset({0, 1}))
    table[0xff] = _Form(modrm=True, regs=frozenset({0, 1, 2, 4, 6}))
    return table


def _two_byte_table():
    table = {
        0x05: _Form(),
        0x0b: _Form(cls=InstClass.HALTING),
        0x1e: _Form(modrm=True),
        0x1f: _Form(modrm=True),
        0xaf: _Form(modrm=True),
        0xb6: _Form(modrm=True),
        0xb7: _Form(modrm=True),
        0xbe: _Form(modrm=True),
        0xbf: _Form(modrm=True),
    }
    for op in range(0x40, 0x50):
        table[op] = _Form(modrm=True)
    for op in range(0x80, 0x90):
        table[op] = _Form(imm='d', cls=InstClass.CBR)
    for op in range(0x90, 0xa0):
        table[op] = _Form(modrm=True, byte_op=True)
    return {0x0f00 | op: form for op, form in table.items()}


ONE_BYTE = _one_byte_table()
TWO_BYTE = _two_byte_table()


@dataclass(frozen=True)
class DecodedInst:
    """A decoded instruction.

    offset is in image coordinates (origin + index). Operand fields come
    straight from the encoding: reg/rm/base/index already include the REX
    extension bits, base/index are None when absent.
    """
    offset: int
    length: int
    raw: bytes
    inst_class: InstClass
    rel_target: Optional[int] = None
    is_call: bool = False
    opcode: int = 0
    prefixes: tuple = ()
    rex: int = 0
    mod: Optional[int] = None
    reg: Optional[int] = None
    rm: Optional[int] = None
    base: Optional[int] = None
    index: Optional[int] = None
    scale: int = 1
    rip_relative: bool = False
    disp: int = 0
    imm: Optional[int] = None
    imm_size: int = 0
    op_size: int = 32

    @property
    def end(self):
        return self.offset + self.length

    @property
    def is_transfer(self):
        return self.inst_class not in (InstClass.NONE, InstClass.HALTING)

    @property
    def falls_through(self):
        if self.inst_class in (InstClass.DIRECT_JMP, InstClass.RETURN, InstClass.HALTING):
            return False
        if self.inst_class is InstClass.INDIRECT and not self.is_call:
            return False
        return True

    @property
    def memory_operand(self):
        return self.mod is not None and self.mod != 3


def _immediate_size(kind, op_size, rex_w):
    if kind == 'b':
        return 1
    if kind == 'w':
        return 2
    if kind == 'd':
        return 4
    if kind == 'z':
        return 2 if op_size == 16 else 4
    if kind == 'v':
        return 8 if rex_w else (2 if op_size == 16 else 4)
    return 0


def parse(image, offset, origin=0):
    """Decode the instruction at image coordinate offset"""
    start = offset - origin
    size = len(image)
    if not 0 <= start < size:
        raise TruncatedInstruction(offset, "offset outside image")
    limit = start + MAX_INST_LEN
    pos = start

    def fetch(count=1):
        nonlocal pos
        if pos + count > size:
            raise TruncatedInstruction(offset, "instruction runs past end of image")
        if pos + count > limit:
            raise InvalidOpcode(origin + pos, "instruction longer than 15 bytes")
        chunk = image[pos:pos + count]
        pos += count
        return chunk

    prefixes = []
    while True:
        byte = fetch()[0]
        if byte not in LEGACY_PREFIXES:
            break
        prefixes.append(byte)

    rex = 0
    if 0x40 <= byte <= 0x4f:
        rex = byte
        byte = fetch()[0]

    opcode_pos = pos - 1
    if byte == 0x0f:
        opcode = 0x0f00 | fetch()[0]
        form = TWO_BYTE.get(opcode)
    else:
        opcode = byte
        form = ONE_BYTE.get(opcode)
    if form is None:
        raise InvalidOpcode(origin + opcode_pos, f"unsupported opcode {opcode:#x}")

    rex_w = bool(rex & 0x8)
    if form.byte_op:
        op_size = 8
    elif rex_w:
        op_size = 64
    elif 0x66 in prefixes:
        op_size = 16
    else:
        op_size = 32

    mod = reg = rm = base = index = None
    scale = 1
    disp = 0
    rip_relative = False
    if form.modrm:
        modrm = fetch()[0]
        mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
        if form.regs is not None and reg not in form.regs:
            raise InvalidOpcode(origin + opcode_pos, f"unsupported opcode extension /{reg} for {opcode:#x}")
        if opcode == 0x8d and mod == 3:
            raise InvalidOpcode(origin + opcode_pos, "lea with register operand")
        disp_size = 0
        if mod != 3:
            if rm == 4:
                sib = fetch()[0]
                scale = 1 << (sib >> 6)
                sib_index = ((sib >> 3) & 7) | (0x8 if rex & 0x2 else 0)
                index = None if sib_index == 4 else sib_index
                sib_base = sib & 7
                if mod == 0 and sib_base == 5:
                    disp_size = 4
                else:
                    base = sib_base | (0x8 if rex & 0x1 else 0)
            elif mod == 0 and rm == 5:
                disp_size = 4
                rip_relative = True
            else:
                base = rm | (0x8 if rex & 0x1 else 0)
            if mod == 1:
                disp_size = 1
            elif mod == 2:
                disp_size = 4
        if disp_size:
            disp = int.from_bytes(fetch(disp_size), 'little', signed=True)
        reg |= 0x8 if rex & 0x4 else 0
        rm |= 0x8 if rex & 0x1 else 0

    kind = form.imm
    if opcode in (0xf6, 0xf7) and reg is not None and reg & 7 in (0, 1):
        kind = 'b' if opcode == 0xf6 else 'z'
    imm_size = _immediate_size(kind, op_size, rex_w)
    imm = int.from_bytes(fetch(imm_size), 'little', signed=True) if imm_size else None

    length = pos - start
    raw = bytes(image[start:pos])

    inst_class = form.cls
    is_call = opcode == 0xe8
    if opcode == 0xff and reg & 7 in (2, 4):
        inst_class = InstClass.INDIRECT
        is_call = reg & 7 == 2
    rel_target = None
    if inst_class in (InstClass.CBR, InstClass.DIRECT_JMP, InstClass.DIRECT_CALL):
        rel_target = offset + length + imm

    return DecodedInst(
        offset=offset,
        length=length,
        raw=raw,
        inst_class=inst_class,
        rel_target=rel_target,
        is_call=is_call,
        opcode=opcode,
        prefixes=tuple(prefixes),
        rex=rex,
        mod=mod,
        reg=reg,
        rm=rm,
        base=base,
        index=index,
        scale=scale,
        rip_relative=rip_relative,
        disp=disp,
        imm=imm,
        imm_size=imm_size,
        op_size=op_size,
    )


def decode_len(image, offset, origin=0):
    return parse(image, offset, origin)


def decode_bytes(inst_bytes):
    """Decode a single complete instruction given as bytes"""
    inst = parse(inst_bytes, 0)
    if inst.length != len(inst_bytes):
        raise InvalidOpcode(inst.length, f"{len(inst_bytes) - inst.length} trailing bytes after instruction")
    return inst
