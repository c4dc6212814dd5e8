import signal

from django.test import SimpleTestCase

from tracebin.core import EdgeKind, NormAddr
from tracebin.corpus import CASES, Emulator, ImageBuilder, build_elf, case_names, emit_elf, gen, run_elf, run_image
from tracebin.corpus.elf import image_file_offset
from tracebin.corpus.emulator import load_elf
from tracebin.exceptions import CorpusError, ImageTooLarge, UnknownCase


def traced_labels(case, *names):
    return {name: NormAddr(0, case.label_of(name)) in case.expected_trace.insts for name in names}


class CorpusCaseTest(SimpleTestCase):
    def test_registry(self):
        self.assertEqual(case_names(), list(CASES))
        self.assertEqual(len(case_names()), 8)
        with self.assertRaises(UnknownCase):
            gen('spec_gcc')

    def test_every_case_exits_cleanly_and_matches_ground_truth(self):
        for name in case_names():
            case = gen(name)
            truth = {entry.offset: entry for entry in case.ground_truth}
            with self.subTest(case=name):
                self.assertFalse(case.expected_trace.partial)
                self.assertEqual(case.expected_trace.modules[0].path, f"{name}.elf")
                for rec in case.expected_trace.insts.values():
                    self.assertEqual(truth[rec.loc.offset].raw, rec.raw)
                ends = [(e.offset, e.end) for e in case.ground_truth]
                for (_, end), (start, _) in zip(ends, ends[1:]):
                    self.assertLessEqual(end, start)

    def test_straight_line(self):
        case = gen('straight_line')
        self.assertEqual(len(case.expected_trace), 7)
        self.assertEqual(case.expected_trace.edges, frozenset())
        self.assertEqual(case.expected_trace.leaders, {NormAddr(0, 0)})

    def test_jump_table_arms_by_argc(self):
        arms = ('t1', 't2', 't3')
        self.assertEqual(traced_labels(gen('jump_table'), *arms), {'t1': True, 't2': True, 't3': True})
        self.assertEqual(traced_labels(gen('jump_table', ('a',)), *arms), {'t1': False, 't2': True, 't3': False})
        self.assertEqual(traced_labels(gen('jump_table', ('a', 'b')), *arms), {'t1': True, 't2': False, 't3': False})
        self.assertEqual(traced_labels(gen('jump_table', ('a', 'b', 'c')), *arms),
                         {'t1': False, 't2': False, 't3': True})

    def test_jump_table_indirect_edges(self):
        case = gen('jump_table')
        indirect = [e for e in case.expected_edges if e.kind is EdgeKind.INDIRECT]
        self.assertEqual(len(indirect), 3)
        self.assertEqual({e.src.offset for e in indirect}, {case.label_of('dispatch')})
        self.assertEqual({e.dst.offset for e in indirect}, {case.label_of(t) for t in ('t1', 't2', 't3')})

    def test_data_in_code_layout(self):
        case = gen('data_in_code')
        self.assertEqual(len(case.image), 28)
        self.assertEqual(case.label_of('Label'), 6)
        self.assertEqual(case.label_of('code'), 10)
        self.assertEqual(case.data_regions, ((6, 4),))
        self.assertEqual(case.image[4:10], bytes.fromhex('eb04e8c5feff'))
        self.assertEqual(sorted(loc.offset for loc in case.expected_trace.insts),
                         [0, 1, 4, 10, 13, 14, 17, 18, 19, 24, 26])

    def test_noreturn_labels(self):
        case = gen('cbr_return_mix')
        self.assertEqual(case.noreturn_targets, frozenset({case.label_of('warn')}))
        self.assertTrue(traced_labels(case, 'one_arg')['one_arg'])
        self.assertFalse(traced_labels(gen('cbr_return_mix', ('x',)), 'one_arg')['one_arg'])


class BuilderTest(SimpleTestCase):
    def test_duplicate_label(self):
        b = ImageBuilder().label('a').inst('nop', '90').label('a')
        with self.assertRaises(CorpusError):
            b.build()

    def test_short_jump_out_of_range(self):
        b = ImageBuilder().label('_start').jmp('far', short=True).data(bytes(200)).label('far').inst('nop', '90')
        with self.assertRaises(CorpusError):
            b.build()

    def test_align_pads_with_fill(self):
        built = ImageBuilder().inst('nop', '90').align(4, fill=0x90).label('x').inst('retq', 'c3').build()
        self.assertEqual(built.image, bytes.fromhex('90909090c3'))
        self.assertEqual(built.labels['x'], 4)
        self.assertEqual([e.offset for e in built.ground_truth], [0, 4])


class EmulatorTest(SimpleTestCase):
    def test_halting_markers_raise_signals(self):
        for marker, signo in (('0f0b', signal.SIGILL), ('cc', signal.SIGTRAP)):
            outcome = run_image(bytes.fromhex('90' + marker), 0)
            with self.subTest(marker=marker):
                self.assertEqual(outcome.signals, ((int(signo), NormAddr(0, 1)),))
                self.assertEqual(outcome.signal_at(NormAddr(0, 1)), [int(signo)])
                self.assertEqual(outcome.exit_code, -int(signo))
                self.assertIn(NormAddr(0, 1), outcome.trace.insts)

    def test_step_limit_marks_trace_partial(self):
        with self.assertLogs('tracebin.corpus.emulator', 'WARNING'):
            outcome = Emulator(bytes.fromhex('ebfe'), 0, max_steps=10).run()
        self.assertTrue(outcome.partial)
        self.assertEqual(len(outcome.trace), 1)

    def test_exit_code(self):
        image = ImageBuilder().label('_start').exit(code=3).build().image
        self.assertEqual(run_image(image, 0).exit_code, 3)


class ElfTest(SimpleTestCase):
    def test_layout(self):
        case = gen('jump_table')
        elf = emit_elf(case)
        self.assertEqual(elf[:4], b'\x7fELF')
        self.assertEqual(elf[image_file_offset(0):image_file_offset(len(case.image))], case.image)
        self.assertEqual(load_elf(elf), (case.image, case.entry, 0x400000))

    def test_same_trace_under_two_bases(self):
        case = gen('jump_table')
        for base in (0x400000, 0x10000000):
            trace = run_elf(emit_elf(case, base), module_path=case.module_name).trace
            with self.subTest(base=base):
                self.assertEqual(dict(trace.insts), dict(case.expected_trace.insts))
                self.assertEqual(trace.edges, case.expected_trace.edges)
                self.assertEqual(trace.leaders, case.expected_trace.leaders)
                self.assertEqual(trace.modules[0].runtime_base, base)

    def test_bad_inputs(self):
        with self.assertRaises(ImageTooLarge):
            build_elf(bytes(0x1001), 0)
        with self.assertRaises(ValueError):
            build_elf(b'\xc3', 0, base=0x400010)
        with self.assertRaises(ValueError):
            build_elf(b'\xc3', 1)
