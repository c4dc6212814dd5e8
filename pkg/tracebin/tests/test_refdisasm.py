from django.test import SimpleTestCase

from tracebin.corpus import gen
from tracebin.exceptions import InvalidOpcode, TruncatedInstruction
from tracebin.refdisasm import (
    ENDBR64,
    HeuristicConfig,
    InstClass,
    decode_bytes,
    decode_len,
    find_endbr,
    linear_sweep,
    recursive_descent,
)

LENGTHS = {
    '55': 1,
    '4889e5': 3,
    '4c8b0c24': 4,
    'bbffffffff': 5,
    '41ba02000000': 6,
    '4983f901': 4,
    '498d59fd': 4,
    '488d1500000000': 7,
    '48630481': 4,
    '48b88877665544332211': 10,
    '66b83412': 4,
    'ff4508': 3,
    'c7450800000000': 7,
    'f7c001000000': 6,
    'f7d8': 2,
    '0fb6c0': 3,
    '0f94c0': 3,
    '0f05': 2,
    'c9': 1,
    'c20800': 3,
    'f30f1efa': 4,
    '3effe0': 3,
    '0f1f440000': 5,
}


class DecoderTest(SimpleTestCase):
    def test_lengths(self):
        for encoding, length in LENGTHS.items():
            with self.subTest(encoding=encoding):
                self.assertEqual(decode_bytes(bytes.fromhex(encoding)).length, length)

    def test_transfer_classes(self):
        cases = {
            'e800000000': (InstClass.DIRECT_CALL, True),
            'e9fbffffff': (InstClass.DIRECT_JMP, False),
            'eb02': (InstClass.DIRECT_JMP, False),
            '7402': (InstClass.CBR, True),
            '0f8400010000': (InstClass.CBR, True),
            'ffe0': (InstClass.INDIRECT, False),
            'ffd0': (InstClass.INDIRECT, True),
            'ff2500000000': (InstClass.INDIRECT, False),
            'c3': (InstClass.RETURN, False),
            '0f0b': (InstClass.HALTING, False),
            'cc': (InstClass.HALTING, False),
            'f4': (InstClass.HALTING, False),
            '90': (InstClass.NONE, True),
        }
        for encoding, (inst_class, falls_through) in cases.items():
            with self.subTest(encoding=encoding):
                inst = decode_bytes(bytes.fromhex(encoding))
                self.assertIs(inst.inst_class, inst_class)
                self.assertEqual(inst.falls_through, falls_through)

    def test_relative_targets_use_image_coordinates(self):
        image = bytes.fromhex('9090eb02') + bytes(4)
        self.assertEqual(decode_len(image, 2).rel_target, 6)
        self.assertEqual(decode_len(image, 0x1002, origin=0x1000).rel_target, 0x1006)
        self.assertEqual(decode_len(bytes.fromhex('e9fbffffff'), 0).rel_target, 0)

    def test_rip_relative_operand(self):
        inst = decode_bytes(bytes.fromhex('488d0510000000'))
        self.assertTrue(inst.rip_relative)
        self.assertEqual(inst.disp, 0x10)

    def test_invalid_and_truncated(self):
        with self.assertRaises(InvalidOpcode):
            decode_bytes(b'\x06')
        with self.assertRaises(InvalidOpcode):
            decode_bytes(bytes.fromhex('ff38'))
        with self.assertRaises(InvalidOpcode):
            decode_bytes(b'\x66' * 15 + b'\x90')
        with self.assertRaises(TruncatedInstruction):
            decode_len(bytes.fromhex('e800'), 0)
        with self.assertRaises(InvalidOpcode):
            decode_bytes(bytes.fromhex('9090'))

    def test_find_endbr(self):
        image = b'\x90' + ENDBR64 + b'\xc3' + ENDBR64
        self.assertEqual(find_endbr(image), [1, 6])
        self.assertEqual(find_endbr(image, origin=0x100), [0x101, 0x106])


class LinearSweepTest(SimpleTestCase):
    def test_straight_line_matches_ground_truth(self):
        case = gen('straight_line')
        view = linear_sweep(case.image, 0)
        self.assertEqual([(r.offset, r.length) for r in view], [(e.offset, e.length) for e in case.ground_truth])

    def test_data_in_code_desynchronizes(self):
        case = gen('data_in_code')
        view = linear_sweep(case.image, 0)
        self.assertEqual(view.get(6).length, 5)
        self.assertEqual(view.get(11).length, 7)
        self.assertIn(18, view)
        for offset in (10, 13, 14, 17):
            self.assertNotIn(offset, view)

    def test_skip_byte_on_invalid(self):
        image = bytes.fromhex('06 90 c3')
        self.assertEqual(linear_sweep(image, 0).offsets, [1, 2])
        self.assertEqual(linear_sweep(image, 0, HeuristicConfig(skip_byte_on_invalid=False)).offsets, [])


class RecursiveDescentTest(SimpleTestCase):
    def test_jump_table_targets_are_missed(self):
        case = gen('jump_table')
        view = recursive_descent(case.image, [case.entry])
        for label in ('t1', 't2', 't3'):
            self.assertNotIn(case.label_of(label), view)
        self.assertIn(case.label_of('dispatch'), view)
        self.assertIn(case.label_of('done'), view)

    def test_endbr_scan_finds_cet_targets(self):
        case = gen('jump_table_cet')
        view = recursive_descent(case.image, [case.entry], HeuristicConfig(endbr_scan=True))
        for label in ('t1', 't2', 't3'):
            self.assertIn(case.label_of(label), view)

    def test_epilogue_stop_skips_code_behind_pop_pop_ret(self):
        case = gen('epilogue_gap')
        helper = case.label_of('helper')
        self.assertNotIn(helper, recursive_descent(case.image, [case.entry]))
        self.assertIn(helper, recursive_descent(case.image, [case.entry], HeuristicConfig(endbr_scan=True)))
        self.assertNotIn(helper, recursive_descent(
            case.image, [case.entry], HeuristicConfig(endbr_scan=True, epilogue_stop=True)
        ))

    def test_noreturn_call_cuts_fall_through(self):
        case = gen('cbr_return_mix')
        cont = case.label_of('cont')
        self.assertIn(cont, recursive_descent(case.image, [case.entry]))
        cfg = HeuristicConfig(noreturn_targets=case.noreturn_targets)
        view = recursive_descent(case.image, [case.entry], cfg)
        self.assertNotIn(cont, view)
        self.assertIn(case.label_of('warn'), view)

    def test_views_match_ground_truth_where_they_decode(self):
        for name in ('jump_table', 'plt_pattern', 'redundant_jump'):
            case = gen(name)
            truth = {e.offset: e for e in case.ground_truth}
            for rec in recursive_descent(case.image, [case.entry]):
                with self.subTest(case=name, offset=rec.offset):
                    self.assertEqual(rec.raw, truth[rec.offset].raw)
