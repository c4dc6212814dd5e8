"""Ground-truthed fixture images.

Each case is a small hand-assembled program that reproduces one pattern
disassemblers get wrong: jump tables, data inside code, PLT stubs, code
behind an epilogue, redundant jumps and no-return calls.
"""

import logging
import struct
from dataclasses import dataclass, field

from ..exceptions import UnknownCase
from ..ingest import DisasmView, ViewRecord
from .builder import ImageBuilder
from .emulator import run_image

logger = logging.getLogger(__name__)

ENDBR64 = 'f3 0f 1e fa'


@dataclass(frozen=True)
class CorpusCase:
    name: str
    description: str
    image: bytes
    ground_truth: tuple
    data_regions: tuple
    entry: int
    labels: dict
    expected_trace: object
    run_args: tuple = ()
    noreturn_targets: frozenset = field(default_factory=frozenset)

    @property
    def expected_edges(self):
        return self.expected_trace.sorted_edges()

    @property
    def module_name(self):
        return f"{self.name}.elf"

    def truth_view(self):
        records = [ViewRecord(e.offset, e.length, e.raw, e.mnemonic) for e in self.ground_truth]
        return DisasmView('truth', 0, records, self.module_name)

    def truth_at(self, offset):
        for entry in self.ground_truth:
            if entry.offset == offset:
                return entry
        return None

    def label_of(self, name):
        return self.labels[name]


def _straight_line():
    b = ImageBuilder()
    b.label('_start')
    b.inst('push %rbp', '55')
    b.inst('mov %rsp,%rbp', '48 89 e5')
    b.inst('xor %eax,%eax', '31 c0')
    b.inst('pop %rbp', '5d')
    b.exit(trap=False)
    return b, 'entry straight to the exit syscall', ()


def _jump_table(cet=False):
    """Computed goto over a three-entry table.

    argc picks the arms: with no arguments all three run in the order the
    `order` array gives (t2, t1, t3); with one, two or three arguments
    only t2, t1 or t3 runs.
    """
    b = ImageBuilder()
    b.label('_start')
    if cet:
        b.inst('endbr64', ENDBR64)
    b.inst('mov (%rsp),%r9', '4c 8b 0c 24')
    b.inst('mov $0xffffffff,%ebx', 'bb ff ff ff ff')
    b.inst('mov $0x2,%r10d', '41 ba 02 00 00 00')
    b.inst('cmp $0x1,%r9', '49 83 f9 01')
    b.branch('je', 'loop_end')
    b.inst('cmp $0x4,%r9', '49 83 f9 04')
    b.branch('jg', 'done')
    b.inst('lea -0x3(%r9),%rbx', '49 8d 59 fd')
    b.inst('lea -0x2(%r9),%r10', '4d 8d 51 fe')
    b.jmp('loop_end', short=True)

    b.label('loop')
    b.rip('lea order(%rip),%rdx', '48 8d 15', 'order')
    b.inst('movslq (%rdx,%rbx,4),%rax', '48 63 04 9a')
    b.rip('lea table(%rip),%rcx', '48 8d 0d', 'table')
    b.inst('movslq (%rcx,%rax,4),%rax', '48 63 04 81')
    b.inst('add %rcx,%rax', '48 01 c8')
    b.label('dispatch')
    b.inst('notrack jmpq *%rax', '3e ff e0')

    b.label('loop_end')
    b.inst('inc %ebx', 'ff c3')
    b.inst('cmp %r10,%rbx', '4c 39 d3')
    b.branch('jle', 'loop')

    b.label('done')
    b.exit()

    b.label('t1')
    if cet:
        b.inst('endbr64', ENDBR64)
    b.inst('add %rdx,%rax', '48 01 d0')
    b.inst('mov $0x1,%eax', 'b8 01 00 00 00')
    b.inst('add %rax,%r8', '49 01 c0')
    b.inst('nop', '90')
    b.jmp('loop_end')

    b.label('t2')
    if cet:
        b.inst('endbr64', ENDBR64)
    b.inst('mov $0x2,%eax', 'b8 02 00 00 00')
    b.inst('add %rax,%r8', '49 01 c0')
    b.inst('test %eax,%eax', '85 c0')
    b.inst('nop', '90')
    b.jmp('loop_end')

    b.label('t3')
    if cet:
        b.inst('endbr64', ENDBR64)
    b.inst('mov $0x3,%eax', 'b8 03 00 00 00')
    b.inst('add %rax,%r8', '49 01 c0')
    b.inst('nop', '90')
    b.jmp('loop_end')

    b.align(4)
    b.label('order')
    b.data(struct.pack('<3i', 1, 0, 2))
    b.label('table')
    b.rel_table('table', ['t1', 't2', 't3'])
    text = 'computed goto through a relative jump table'
    return b, text + (', endbr64 at every target' if cet else ''), ()


def _data_in_code():
    b = ImageBuilder()
    b.label('_start')
    b.inst('push %rbp', '55')
    b.inst('mov %rsp,%rbp', '48 89 e5')
    b.jmp('Label', short=True, addend=4)
    b.label('Label')
    # a sweep reads e8 as a five-byte call that swallows the first byte of incl
    # and only resyncs at pop: it misses incl, nop, decl and the trailing nop
    b.data(bytes.fromhex('e8c5feff'))
    b.label('code')
    b.inst('incl 0x8(%rbp)', 'ff 45 08')
    b.inst('nop', '90')
    b.inst('decl 0x8(%rbp)', 'ff 4d 08')
    b.inst('nop', '90')
    b.inst('pop %rbp', '5d')
    b.exit(trap=False)
    return b, 'data bytes between a jump and its target desynchronize a linear sweep', ()


def _plt_pattern():
    b = ImageBuilder()
    b.label('_start')
    b.rip('lea plt_push(%rip),%rax', '48 8d 05', 'plt_push')
    b.rip('mov %rax,got(%rip)', '48 89 05', 'got')
    b.call('foo_plt')
    b.call('foo_plt')
    b.exit()

    # the lazy resolver: binds foo in the GOT and jumps to it
    b.label('plt0')
    b.inst('pop %rax', '58')
    b.rip('lea foo(%rip),%rax', '48 8d 05', 'foo')
    b.rip('mov %rax,got(%rip)', '48 89 05', 'got')
    b.inst('jmpq *%rax', 'ff e0')

    b.label('foo_plt')
    b.rip('jmpq *got(%rip)', 'ff 25', 'got')
    b.label('plt_push')
    b.inst('pushq $0x0', '68 00 00 00 00')
    b.jmp('plt0')

    b.label('foo')
    b.inst('mov $0x7,%eax', 'b8 07 00 00 00')
    b.inst('retq', 'c3')

    b.align(8)
    b.label('got')
    b.data(bytes(8))
    return b, 'lazy binding stub: jmp through the GOT, push, jmp to the resolver', ()


def _epilogue_gap():
    b = ImageBuilder()
    b.label('_start')
    b.call('func')
    b.exit()

    b.label('func')
    b.inst('push %rbx', '53')
    b.inst('push %r12', '41 54')
    b.rip('lea helper(%rip),%rax', '48 8d 05', 'helper')
    b.inst('callq *%rax', 'ff d0')
    b.inst('pop %r12', '41 5c')
    b.inst('pop %rbx', '5b')
    b.inst('retq', 'c3')

    b.label('helper')
    b.inst('endbr64', ENDBR64)
    b.inst('mov $0x5,%eax', 'b8 05 00 00 00')
    b.inst('add %rax,%r8', '49 01 c0')
    b.inst('retq', 'c3')
    return b, 'function reached only through a pointer, placed right after pop; pop; ret', ()


def _redundant_jump():
    b = ImageBuilder()
    b.label('_start')
    b.inst('push %rbp', '55')
    b.inst('mov %rsp,%rbp', '48 89 e5')
    b.inst('mov $0x30,%edi', 'bf 30 00 00 00')
    b.call('work')
    b.label('jump1')
    b.jmp('next1')
    b.label('next1')
    b.inst('mov %eax,%edi', '89 c7')
    b.call('work')
    b.label('jump2')
    b.jmp('next2')
    b.label('next2')
    b.inst('pop %rbp', '5d')
    b.exit()

    b.label('work')
    b.inst('lea 0x1(%rdi),%eax', '8d 47 01')
    b.inst('retq', 'c3')
    return b, 'jmpq to the immediately following instruction', ()


def _cbr_return_mix():
    b = ImageBuilder()
    b.label('_start')
    b.inst('mov (%rsp),%r9', '4c 8b 0c 24')
    b.inst('cmp $0x1,%r9', '49 83 f9 01')
    b.branch('je', 'one_arg')
    b.inst('xor %eax,%eax', '31 c0')
    b.jmp('join', short=True)
    b.label('one_arg')
    b.inst('mov $0x1,%eax', 'b8 01 00 00 00')
    b.jmp('join', short=True)
    b.label('join')
    b.call('warn')
    b.label('cont')
    b.inst('xor %edi,%edi', '31 ff')
    b.inst('mov $0x3c,%eax', 'b8 3c 00 00 00')
    b.inst('syscall', '0f 05')
    b.inst('ud2', '0f 0b')

    b.label('warn')
    b.inst('add $0x1,%r8', '49 83 c0 01')
    b.inst('retq', 'c3')
    return b, 'conditional branch and a call a disassembler may treat as no-return', ('warn',)


CASES = {
    'jump_table': _jump_table,
    'jump_table_cet': lambda: _jump_table(cet=True),
    'data_in_code': _data_in_code,
    'plt_pattern': _plt_pattern,
    'epilogue_gap': _epilogue_gap,
    'redundant_jump': _redundant_jump,
    'cbr_return_mix': _cbr_return_mix,
    'straight_line': _straight_line,
}


def case_names():
    return list(CASES)


def gen(name, args=()):
    """Build a corpus case; args are the extra argv the expected trace is run with"""
    try:
        factory = CASES[name]
    except KeyError:
        raise UnknownCase(f"unknown corpus case {name!r}; choose from {', '.join(CASES)}")

    builder, description, noreturn = factory()
    built = builder.build()
    entry = built.labels['_start']
    module_name = f"{name}.elf"
    outcome = run_image(built.image, entry, args=args, module_path=module_name)
    if outcome.exit_code != 0:
        logger.warning(f"Corpus case {name} exited with {outcome.exit_code} under the interpreter")

    return CorpusCase(
        name=name,
        description=description,
        image=built.image,
        ground_truth=built.ground_truth,
        data_regions=built.data_regions,
        entry=entry,
        labels=dict(built.labels),
        expected_trace=outcome.trace,
        run_args=tuple(args),
        noreturn_targets=frozenset(built.labels[label] for label in noreturn),
    )
