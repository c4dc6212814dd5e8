"""A small x86-64 interpreter for corpus images.

It executes exactly the instruction subset the corpus uses, on top of the
reference decoder's operand parse, and records what it runs the same way
the live tracer does. Running off the supported subset raises
EmulationError instead of guessing.
"""

import io
import logging
import signal

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile

from ..core import EdgeKind, EdgeRecord, InstRecord, ModuleInfo, NormAddr, TraceOutcome, TraceSet
from ..exceptions import DecodeError, EmulationError
from ..refdisasm.decoder import InstClass, parse

logger = logging.getLogger(__name__)

DEFAULT_BASE = 0x400000
STACK_TOP = 0x7ffffffde000
STACK_SIZE = 0x10000
MAX_STEPS = 100000

MASK64 = (1 << 64) - 1

RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)

SYS_WRITE = 1
SYS_GETPID = 39
SYS_EXIT = 60
SYS_EXIT_GROUP = 231

_EDGE_KINDS = {
    InstClass.CBR: EdgeKind.CBR,
    InstClass.DIRECT_JMP: EdgeKind.DIRECT,
    InstClass.DIRECT_CALL: EdgeKind.DIRECT,
    InstClass.INDIRECT: EdgeKind.INDIRECT,
    InstClass.RETURN: EdgeKind.RETURN,
}

# ALU operation per opcode row (00-3F) and per grp1 /reg
_ALU = {0: 'add', 1: 'or', 4: 'and', 5: 'sub', 6: 'xor', 7: 'cmp'}


class MemoryFault(Exception):
    def __init__(self, address):
        super().__init__(f"access to unmapped address {address:#x}")
        self.address = address


class _Stop(Exception):
    def __init__(self, exit_code=None, signo=None):
        super().__init__()
        self.exit_code = exit_code
        self.signo = signo


def _mask(size):
    return (1 << size) - 1


def _signed(value, size):
    value &= _mask(size)
    return value - (1 << size) if value >> (size - 1) else value


class Memory:
    def __init__(self):
        self._segments = []

    def map(self, start, data):
        self._segments.append((start, bytearray(data)))

    def _locate(self, address, size):
        for start, buf in self._segments:
            if start <= address and address + size <= start + len(buf):
                return buf, address - start
        raise MemoryFault(address)

    def read(self, address, size):
        buf, index = self._locate(address, size)
        return bytes(buf[index:index + size])

    def write(self, address, data):
        buf, index = self._locate(address, len(data))
        buf[index:index + len(data)] = data

    def read_int(self, address, size):
        return int.from_bytes(self.read(address, size // 8), 'little')

    def write_int(self, address, value, size):
        self.write(address, (value & _mask(size)).to_bytes(size // 8, 'little'))


class Emulator:
    def __init__(self, image, entry, base=DEFAULT_BASE, args=(), module_path='image', max_steps=MAX_STEPS):
        self.image_size = len(image)
        self.base = base
        self.module = ModuleInfo(0, module_path, base, 0, len(image))
        self.max_steps = max_steps
        self.memory = Memory()
        self.memory.map(base, image)
        self.memory.map(STACK_TOP - STACK_SIZE, bytes(STACK_SIZE))
        self.regs = [0] * 16
        self.rip = base + entry
        self.cf = self.zf = self.sf = self.of = 0
        self._rex = 0
        self._setup_stack([module_path, *args])

    def _setup_stack(self, argv):
        pointer = STACK_TOP - 0x800
        addresses = []
        for arg in argv:
            raw = arg.encode() + b'\0'
            self.memory.write(pointer, raw)
            addresses.append(pointer)
            pointer += len(raw)
        words = [len(argv), *addresses, 0, 0, 0, 0]
        rsp = STACK_TOP - 0x1000
        for index, word in enumerate(words):
            self.memory.write_int(rsp + 8 * index, word, 64)
        self.regs[RSP] = rsp

    # registers

    def get_reg(self, number, size):
        if size == 8 and number in (4, 5, 6, 7) and not self._rex:
            raise EmulationError(f"high byte register access at {self.rip:#x}")
        return self.regs[number] & _mask(size)

    def set_reg(self, number, value, size):
        if size == 64 or size == 32:
            self.regs[number] = value & _mask(size)
        else:
            if size == 8 and number in (4, 5, 6, 7) and not self._rex:
                raise EmulationError(f"high byte register access at {self.rip:#x}")
            self.regs[number] = (self.regs[number] & ~_mask(size) & MASK64) | (value & _mask(size))

    # operands

    def effective_address(self, inst, next_rip):
        if inst.rip_relative:
            return (next_rip + inst.disp) & MASK64
        address = inst.disp
        if inst.base is not None:
            address += self.regs[inst.base]
        if inst.index is not None:
            address += self.regs[inst.index] * inst.scale
        return address & MASK64

    def read_rm(self, inst, next_rip, size=None):
        size = size or inst.op_size
        if inst.mod == 3:
            return self.get_reg(inst.rm, size)
        return self.memory.read_int(self.effective_address(inst, next_rip), size)

    def write_rm(self, inst, next_rip, value, size=None):
        size = size or inst.op_size
        if inst.mod == 3:
            self.set_reg(inst.rm, value, size)
        else:
            self.memory.write_int(self.effective_address(inst, next_rip), value, size)

    def push(self, value):
        self.regs[RSP] = (self.regs[RSP] - 8) & MASK64
        self.memory.write_int(self.regs[RSP], value, 64)

    def pop(self):
        value = self.memory.read_int(self.regs[RSP], 64)
        self.regs[RSP] = (self.regs[RSP] + 8) & MASK64
        return value

    # flags

    def _result_flags(self, result, size):
        self.zf = int(result & _mask(size) == 0)
        self.sf = (result >> (size - 1)) & 1

    def alu(self, op, a, b, size):
        mask = _mask(size)
        if op == 'add':
            result = (a + b) & mask
            self.cf = int(a + b > mask)
            self.of = (((a ^ result) & (b ^ result)) >> (size - 1)) & 1
        elif op in ('sub', 'cmp'):
            result = (a - b) & mask
            self.cf = int(a < b)
            self.of = (((a ^ b) & (a ^ result)) >> (size - 1)) & 1
        elif op in ('and', 'test'):
            result = a & b
            self.cf = self.of = 0
        elif op == 'or':
            result = a | b
            self.cf = self.of = 0
        elif op == 'xor':
            result = a ^ b
            self.cf = self.of = 0
        else:
            raise EmulationError(f"unsupported ALU operation {op}")
        self._result_flags(result, size)
        return result

    def condition(self, cc):
        checks = {
            0x0: self.of,
            0x2: self.cf,
            0x4: self.zf,
            0x6: self.cf | self.zf,
            0x8: self.sf,
            0xc: int(self.sf != self.of),
            0xe: self.zf | int(self.sf != self.of),
        }
        if cc & ~1 == 0xa:
            raise EmulationError("parity flag is not modelled")
        taken = checks[cc & ~1]
        return not taken if cc & 1 else bool(taken)

    # execution

    def step(self):
        """Execute one instruction; return (inst, next rip)"""
        offset = self.rip - self.base
        if not 0 <= offset < self.image_size:
            raise MemoryFault(self.rip)
        window = self.memory.read(self.rip, min(15, self.image_size - offset))
        try:
            inst = parse(window, offset, offset)
        except DecodeError as e:
            raise _Stop(signo=signal.SIGILL) from e
        self._rex = inst.rex
        next_rip = self.rip + inst.length
        target = self.execute(inst, next_rip)
        return inst, (next_rip if target is None else target) & MASK64

    def execute(self, inst, next_rip):
        op = inst.opcode
        size = inst.op_size

        if op < 0x40 and op & 7 < 4:
            name = _ALU.get(op >> 3)
            if name is None:
                raise EmulationError(f"unsupported opcode {op:#x}")
            reg = self.get_reg(inst.reg, size)
            rm = self.read_rm(inst, next_rip)
            if op & 2:
                result = self.alu(name, reg, rm, size)
                if name != 'cmp':
                    self.set_reg(inst.reg, result, size)
            else:
                result = self.alu(name, rm, reg, size)
                if name != 'cmp':
                    self.write_rm(inst, next_rip, result)
        elif op in (0x80, 0x81, 0x83):
            name = _ALU.get(inst.reg & 7)
            if name is None:
                raise EmulationError(f"unsupported group 1 extension /{inst.reg & 7}")
            result = self.alu(name, self.read_rm(inst, next_rip), inst.imm & _mask(size), size)
            if name != 'cmp':
                self.write_rm(inst, next_rip, result)
        elif op in (0x84, 0x85):
            self.alu('test', self.read_rm(inst, next_rip), self.get_reg(inst.reg, size), size)
        elif op in (0x88, 0x89):
            self.write_rm(inst, next_rip, self.get_reg(inst.reg, size))
        elif op in (0x8a, 0x8b):
            self.set_reg(inst.reg, self.read_rm(inst, next_rip), size)
        elif op == 0x8d:
            self.set_reg(inst.reg, self.effective_address(inst, next_rip), size)
        elif op == 0x63:
            value = _signed(self.read_rm(inst, next_rip, 32), 32)
            self.set_reg(inst.reg, value, size)
        elif 0xb8 <= op <= 0xbf:
            self.set_reg((op & 7) | (0x8 if inst.rex & 0x1 else 0), inst.imm, size)
        elif op == 0xc7:
            self.write_rm(inst, next_rip, inst.imm)
        elif 0x50 <= op <= 0x57:
            self.push(self.regs[(op & 7) | (0x8 if inst.rex & 0x1 else 0)])
        elif 0x58 <= op <= 0x5f:
            self.regs[(op & 7) | (0x8 if inst.rex & 0x1 else 0)] = self.pop()
        elif op in (0x68, 0x6a):
            self.push(inst.imm & MASK64)
        elif op == 0xc9:
            self.regs[RSP] = self.regs[RBP]
            self.regs[RBP] = self.pop()
        elif op == 0xff:
            return self._group5(inst, next_rip)
        elif inst.inst_class is InstClass.CBR:
            return self.base + inst.rel_target if self.condition(op & 0xf) else None
        elif op in (0xe9, 0xeb):
            return self.base + inst.rel_target
        elif op == 0xe8:
            self.push(next_rip)
            return self.base + inst.rel_target
        elif op in (0xc3, 0xc2):
            target = self.pop()
            if op == 0xc2:
                self.regs[RSP] = (self.regs[RSP] + inst.imm) & MASK64
            return target
        elif op in (0x90, 0x0f1e, 0x0f1f):
            pass
        elif op == 0x0f05:
            self._syscall()
        elif op == 0x0f0b:
            raise _Stop(signo=signal.SIGILL)
        elif op == 0xcc:
            raise _Stop(signo=signal.SIGTRAP)
        elif op == 0xf4:
            raise _Stop(signo=signal.SIGSEGV)
        else:
            raise EmulationError(f"opcode {op:#x} at {self.rip:#x} is not modelled")
        return None

    def _group5(self, inst, next_rip):
        ext = inst.reg & 7
        size = inst.op_size
        if ext in (0, 1):
            carry = self.cf
            result = self.alu('add' if ext == 0 else 'sub', self.read_rm(inst, next_rip), 1, size)
            self.cf = carry
            self.write_rm(inst, next_rip, result)
            return None
        target = self.read_rm(inst, next_rip, 64)
        if ext == 2:
            self.push(next_rip)
            return target
        if ext == 4:
            return target
        self.push(target)
        return None

    def _syscall(self):
        number = self.regs[RAX]
        if number in (SYS_EXIT, SYS_EXIT_GROUP):
            raise _Stop(exit_code=self.regs[RDI] & 0xff)
        if number == SYS_WRITE:
            self.regs[RAX] = self.regs[RDX]
        elif number == SYS_GETPID:
            self.regs[RAX] = 1000
        else:
            raise EmulationError(f"syscall {number} is not modelled")
        self.regs[RCX] = self.rip + 2
        self.regs[11] = 0x202

    def run(self):
        insts = {}
        edges = set()
        leaders = {self.loc(self.rip)}
        signals = []
        exit_code = None
        partial = False

        for _ in range(self.max_steps):
            address = self.rip
            loc = self.loc(address)
            try:
                inst, target = self.step()
            except _Stop as stop:
                if stop.signo is not None:
                    self._record(insts, loc, address)
                    signals.append((int(stop.signo), loc))
                    exit_code = -int(stop.signo)
                else:
                    self._record(insts, loc, address)
                    exit_code = stop.exit_code
                break
            except MemoryFault as fault:
                logger.debug(f"Emulated program faulted: {fault}")
                signals.append((int(signal.SIGSEGV), loc))
                exit_code = -int(signal.SIGSEGV)
                break

            insts.setdefault(loc, InstRecord(loc, inst.length, inst.raw))
            self.rip = target
            kind = _EDGE_KINDS.get(inst.inst_class)
            if kind is not None:
                if self.base <= target < self.base + self.image_size:
                    edges.add(EdgeRecord(loc, self.loc(target), kind))
                    leaders.add(self.loc(target))
        else:
            logger.warning(f"Emulation stopped after {self.max_steps} steps")
            partial = True

        edges = {e for e in edges if e.dst in insts}
        leaders = {leader for leader in leaders if leader in insts}
        trace = TraceSet.build([self.module], insts.values(), edges, leaders, partial=partial)
        return TraceOutcome(trace, exit_code, tuple(signals))

    def loc(self, address):
        return NormAddr(0, address - self.base)

    def _record(self, insts, loc, address):
        """Record the instruction that stopped the run, when it decodes"""
        offset = address - self.base
        if not 0 <= offset < self.image_size or loc in insts:
            return
        window = self.memory.read(address, min(15, self.image_size - offset))
        try:
            inst = parse(window, offset, offset)
        except DecodeError:
            return
        insts[loc] = InstRecord(loc, inst.length, inst.raw)


def run_image(image, entry, args=(), base=DEFAULT_BASE, module_path='image'):
    return Emulator(image, entry, base, args, module_path).run()


def load_elf(elf_bytes):
    """Return (image, entry offset, base) of a single-segment ELF"""
    try:
        elf = ELFFile(io.BytesIO(elf_bytes))
        segments = [seg for seg in elf.iter_segments() if seg['p_type'] == 'PT_LOAD']
        if len(segments) != 1:
            raise EmulationError(f"expected one load segment, found {len(segments)}")
        segment = segments[0]
        base = segment['p_vaddr']
        return segment.data(), elf.header['e_entry'] - base, base
    except ELFError as e:
        raise EmulationError(f"cannot read ELF: {e}")


def run_elf(elf_bytes, args=(), module_path='image'):
    image, entry, base = load_elf(elf_bytes)
    return Emulator(image, entry, base, args, module_path).run()
