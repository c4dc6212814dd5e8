import os
import tempfile
from unittest import mock, skipUnless

from django.test import SimpleTestCase

from tracebin import explain, patchlab
from tracebin.core import EdgeKind, ModuleInfo, NormAddr
from tracebin.corpus import emit_elf, gen
from tracebin.evaluator import evaluate
from tracebin.exceptions import LaunchFailure, UndecodableInstruction, UnsupportedPlatform
from tracebin.refdisasm import recursive_descent
from tracebin.tracer import RunSpec, Tracer, classify_transfer, collect, tracer_available
from tracebin.tracer import ptrace
from tracebin.tracer.procmaps import build_modules, parse_maps

MAPS = """\
00400000-00401000 r--p 00000000 08:01 1234 /opt/prog
00401000-00402000 r-xp 00001000 08:01 1234 /opt/prog
00402000-00403000 rw-p 00002000 08:01 1234 /opt/prog
7f0000000000-7f0000001000 r--p 00000000 08:01 99 /lib/libc.so.6
7f0000001000-7f0000005000 r-xp 00001000 08:01 99 /lib/libc.so.6
7ffff7ff9000-7ffff7ffd000 r--p 00000000 00:00 0 [vvar]
7ffff7ffd000-7ffff7fff000 r-xp 00000000 00:00 0 [vdso]
7ffffffde000-7ffffffff000 rw-p 00000000 00:00 0 [stack]
"""


def write_executable(directory, name, content):
    path = os.path.join(directory, name)
    with open(path, 'wb') as f:
        f.write(content)
    os.chmod(path, 0o755)
    return path


class ProcMapsTest(SimpleTestCase):
    def test_parse(self):
        mappings = parse_maps(MAPS)
        self.assertEqual(len(mappings), 8)
        self.assertEqual(mappings[1].start, 0x401000)
        self.assertTrue(mappings[1].executable)
        self.assertFalse(mappings[0].executable)
        self.assertEqual(mappings[-1].path, '[stack]')

    def test_modules_from_mappings(self):
        # the paths do not exist, so text ranges come from the executable mappings
        modules = build_modules(parse_maps(MAPS), main_path='/opt/prog')
        self.assertEqual(modules, [
            ModuleInfo(0, '/opt/prog', 0x400000, 0x1000, 0x1000),
            ModuleInfo(1, '/lib/libc.so.6', 0x7f0000000000, 0x1000, 0x4000),
        ])

    def test_main_module_comes_first(self):
        modules = build_modules(parse_maps(MAPS), main_path='/lib/libc.so.6')
        self.assertEqual([m.path for m in modules], ['/lib/libc.so.6', '/opt/prog'])

    def test_text_range_from_elf_headers(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_executable(tmp, 'prog', emit_elf(gen('straight_line')))
            maps = f"00400000-00402000 r-xp 00000000 08:01 1 {path}\n"
            module = build_modules(parse_maps(maps), main_path=path)[0]
        self.assertEqual((module.runtime_base, module.text_start), (0x400000, 0))
        self.assertEqual(module.text_size, len(gen('straight_line').image))


class ClassifyTransferTest(SimpleTestCase):
    def test_kinds(self):
        cases = {
            '7402': EdgeKind.CBR,
            'eb02': EdgeKind.DIRECT,
            'e800000000': EdgeKind.DIRECT,
            'ffe0': EdgeKind.INDIRECT,
            'c3': EdgeKind.RETURN,
            '90': None,
            '0f0b': None,
        }
        for encoding, kind in cases.items():
            with self.subTest(encoding=encoding):
                self.assertIs(classify_transfer(bytes.fromhex(encoding)), kind)

    def test_undecodable(self):
        with self.assertRaises(UndecodableInstruction):
            classify_transfer(b'\x06')


class RunSpecTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.program = write_executable(self.tmp.name, 'prog', b'\x7fELF')

    def tearDown(self):
        self.tmp.cleanup()

    def test_validation(self):
        with self.assertRaises(LaunchFailure):
            RunSpec(os.path.join(self.tmp.name, 'missing'))
        with self.assertRaises(LaunchFailure):
            RunSpec(self.program, timeout_s=0)
        with self.assertRaises(LaunchFailure):
            RunSpec(self.program, env=('NOEQUALS',))

    def test_environment(self):
        self.assertIsNone(RunSpec(self.program).environment())
        self.assertEqual(RunSpec(self.program, env=('A=1', 'B=x=y')).environment(), {'A': '1', 'B': 'x=y'})

    def test_unsupported_host(self):
        with mock.patch.object(ptrace, 'host_supported', return_value=False):
            with self.assertRaises(UnsupportedPlatform):
                Tracer(RunSpec(self.program)).run()

    def test_reentry_after_steps_outside_every_module(self):
        tracer = Tracer(RunSpec(self.program))
        first, later = NormAddr(0, 0x10), NormAddr(0, 0x20)
        self.assertFalse(tracer.reenter(first))
        self.assertEqual(tracer.leaders, set())

        # as the step loop does for a vdso step
        tracer.outside = True
        self.assertTrue(tracer.reenter(later))
        self.assertFalse(tracer.reenter(first))
        self.assertEqual(tracer.leaders, {later})


@skipUnless(tracer_available(), 'ptrace tracing is not available on this host')
class LiveTraceTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_matches_the_emulator_under_two_bases(self):
        case = gen('jump_table')
        for base in (0x400000, 0x10000000):
            path = write_executable(self.tmp.name, f"jt-{base:x}", emit_elf(case, base))
            for block_skip in (True, False):
                trace = collect(RunSpec(path), block_skip=block_skip)
                with self.subTest(base=base, block_skip=block_skip):
                    self.assertFalse(trace.partial)
                    self.assertEqual(trace.modules[0].runtime_base, base)
                    self.assertEqual(dict(trace.insts), dict(case.expected_trace.insts))
                    self.assertEqual(trace.edges, case.expected_trace.edges)

    def test_arguments_select_the_arm(self):
        case = gen('jump_table', ('a',))
        path = write_executable(self.tmp.name, 'jt', emit_elf(case))
        trace = collect(RunSpec(path, ('a',)))
        self.assertEqual(set(trace.insts), set(case.expected_trace.insts))

    def test_live_patch_verdict(self):
        case = gen('jump_table')
        view = recursive_descent(case.image, [case.entry])
        report = evaluate(case.expected_trace, view)
        plan = patchlab.plan(report, explain.explain(case.expected_trace, view, report), case.image)[0]
        patched_elf = patchlab.apply_to_elf(emit_elf(case), plan)
        patched_view = recursive_descent(patchlab.apply(case.image, plan), [case.entry])
        self.assertIs(patchlab.verify(patched_elf, patched_view, plan), patchlab.Verdict.HIDDEN_AND_REACHED)
