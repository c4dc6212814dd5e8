import os
import random
import tempfile

from django.test import SimpleTestCase

from tracebin import evaluator
from tracebin.core import InstRecord, ModuleInfo, NormAddr, TraceSet
from tracebin.corpus import gen
from tracebin.evaluator import ErrorKind, bucketize, diff_reports, evaluate
from tracebin.exceptions import ModuleMismatch, ReportFormatError, TargetMismatch
from tracebin.ingest import DisasmView, ViewRecord
from tracebin.refdisasm import HeuristicConfig, linear_sweep, recursive_descent

MODULE = ModuleInfo(0, '/bin/prog', 0x400000, 0, 0x4000)


def make_trace(records):
    return TraceSet.build([MODULE], [InstRecord(NormAddr(0, off), len(raw), raw) for off, raw in records])


def random_case(rng):
    program = []
    offset = 0
    for _ in range(rng.randint(1, 300)):
        length = rng.randint(1, 8)
        program.append((offset, bytes(rng.randrange(256) for _ in range(length))))
        offset += length + rng.choice((0, 0, 0, 2))
    traced = rng.sample(program, rng.randint(1, len(program)))
    starts = {off for off, _ in program}

    claims = {}
    for off, raw in program:
        roll = rng.random()
        if roll < 0.5:
            claims[off] = ViewRecord(off, len(raw), raw)
        elif roll < 0.6:
            claims[off] = ViewRecord(off, len(raw))
        elif roll < 0.7:
            claims[off] = ViewRecord(off, len(raw) + 1)
        elif roll < 0.8:
            bad = bytes([raw[0] ^ 0xff]) + raw[1:]
            claims[off] = ViewRecord(off, len(raw), bad)
        elif roll < 0.9 and off + 1 not in starts:
            claims[off + 1] = ViewRecord(off + 1, 2)
    return make_trace(traced), list(claims.values())


def brute_force(trace, records):
    expected = {}
    for rec in trace.insts.values():
        matches = [c for c in records if c.offset == rec.loc.offset]
        if not matches:
            expected[rec.loc] = ErrorKind.MISSING
        elif matches[0].length != rec.length or (matches[0].raw is not None and matches[0].raw != rec.raw):
            expected[rec.loc] = ErrorKind.MISMATCH
    return expected


class BucketTest(SimpleTestCase):
    def test_boundaries(self):
        table = {0: 'Z', 1: 'A', 80: 'A', 81: 'B', 410: 'B', 411: 'C', 1009: 'C', 1010: 'D', 10 ** 6: 'D'}
        for total, label in table.items():
            with self.subTest(total=total):
                self.assertEqual(bucketize(total), label)

    def test_negative(self):
        with self.assertRaises(ValueError):
            bucketize(-1)


class EvaluateTest(SimpleTestCase):
    def setUp(self):
        self.trace = make_trace([(0, b'\x55'), (1, b'\x48\x89\xe5'), (4, b'\xe8\x00\x00\x00\x00'), (9, b'\xc3')])

    def test_missing_mismatch_and_length_only(self):
        view = DisasmView('tool', 0, [
            ViewRecord(0, 1, b'\x55'),
            ViewRecord(1, 3),
            ViewRecord(4, 5, b'\xe8\x00\x00\x00\x01'),
            ViewRecord(6, 4),
        ])
        report = evaluate(self.trace, view, target='prog')
        kinds = {e.loc.offset: e.kind for e in report.errors}
        self.assertEqual(kinds, {4: ErrorKind.MISMATCH, 9: ErrorKind.MISSING})
        self.assertEqual(report.traced_count, 4)
        self.assertEqual(report.length_only_count, 1)
        self.assertEqual(report.tool, 'tool')
        missing = [e for e in report.errors if e.kind is ErrorKind.MISSING][0]
        self.assertEqual(missing.view_claim, ViewRecord(6, 4))

    def test_perfect_view(self):
        view = DisasmView('truth', 0, [ViewRecord(r.loc.offset, r.length, r.raw) for r in self.trace.insts.values()])
        report = evaluate(self.trace, view)
        self.assertEqual(report.total, 0)
        self.assertEqual(report.bucket, 'Z')
        self.assertEqual(report.target, 'prog')

    def test_never_executed_claims_are_not_judged(self):
        view = DisasmView('tool', 0, [ViewRecord(r.loc.offset, r.length) for r in self.trace.insts.values()]
                          + [ViewRecord(0x100, 7), ViewRecord(0x2000, 1)])
        self.assertEqual(evaluate(self.trace, view).total, 0)

    def test_view_for_another_binary(self):
        view = DisasmView('tool', 0, [], target='other')
        with self.assertRaises(ModuleMismatch):
            evaluate(self.trace, view)
        self.assertEqual(evaluate(self.trace, DisasmView('tool', 0, [], target='prog')).missing_count, 4)

    def test_every_error_is_a_traced_location(self):
        rng = random.Random(5)
        for _ in range(1000):
            trace, records = random_case(rng)
            report = evaluate(trace, DisasmView('random', 0, records))
            found = {e.loc: e.kind for e in report.errors}
            self.assertEqual(found, brute_force(trace, records))
            self.assertTrue(report.error_locs() <= set(trace.insts))


class CorpusEvaluationTest(SimpleTestCase):
    def test_jump_table_recursive_misses_fourteen(self):
        case = gen('jump_table')
        report = evaluate(case.expected_trace, recursive_descent(case.image, [case.entry]))
        self.assertEqual(report.missing_count, 14)
        self.assertEqual(report.mismatch_count, 0)

    def test_endbr_scan_finds_everything_with_cet(self):
        case = gen('jump_table_cet')
        view = recursive_descent(case.image, [case.entry], HeuristicConfig(endbr_scan=True))
        self.assertEqual(evaluate(case.expected_trace, view).total, 0)

    def test_data_in_code_missing_set(self):
        case = gen('data_in_code')
        report = evaluate(case.expected_trace, linear_sweep(case.image, 0, HeuristicConfig(skip_byte_on_invalid=True)))
        missed = {e.loc.offset for e in report.errors}
        self.assertEqual(missed, {10, 13, 14, 17})
        self.assertEqual(
            [case.truth_at(offset).mnemonic.split()[0] for offset in sorted(missed)],
            ['incl', 'nop', 'decl', 'nop'],
        )

    def test_ground_truth_is_perfect(self):
        for name in ('jump_table', 'data_in_code', 'plt_pattern', 'epilogue_gap'):
            case = gen(name)
            with self.subTest(case=name):
                self.assertEqual(evaluate(case.expected_trace, case.truth_view()).total, 0)


class SerializationTest(SimpleTestCase):
    def setUp(self):
        trace = make_trace([(0, b'\x55'), (1, b'\x48\x89\xe5'), (4, b'\xc3')])
        view = DisasmView('ghidra', 0, [ViewRecord(0, 1, b'\x55'), ViewRecord(2, 2)])
        self.report = evaluate(trace, view, target='prog')

    def test_csv_layout(self):
        text = evaluator.dumps_csv(self.report)
        lines = text.splitlines()
        self.assertTrue(lines[0].startswith('# {'))
        self.assertEqual(lines[1:], ['1,missing,3,4889e5,', '4,missing,1,c3,'])

    def test_csv_and_json_readers(self):
        for text in (evaluator.dumps_csv(self.report), evaluator.dumps_json(self.report)):
            loaded = evaluator.loads_json(text) if text.startswith('{') else evaluator.loads_csv(text)
            self.assertEqual(loaded.summary(), self.report.summary())
            self.assertEqual(loaded.error_locs(), self.report.error_locs())

    def test_read_report_detects_format(self):
        with tempfile.TemporaryDirectory() as tmp:
            for as_json in (False, True):
                path = os.path.join(tmp, f"r{int(as_json)}")
                evaluator.write_report(path, self.report, as_json=as_json)
                self.assertEqual(evaluator.read_report(path).summary(), self.report.summary())

    def test_bad_reports(self):
        with self.assertRaises(ReportFormatError):
            evaluator.loads_csv('1,missing,1,c3,\n')
        with self.assertRaises(ReportFormatError):
            evaluator.loads_csv('# {"target": "p", "tool": "t", "total": 5}\n1,missing,1,c3,\n')
        with self.assertRaises(ReportFormatError):
            evaluator.loads_json('{"summary": {}}')


class DiffTest(SimpleTestCase):
    def test_delta(self):
        trace = make_trace([(0, b'\x55'), (1, b'\x90'), (2, b'\xc3')])
        a = evaluate(trace, DisasmView('a', 0, [ViewRecord(0, 1)]), target='prog')
        b = evaluate(trace, DisasmView('b', 0, [ViewRecord(1, 1)]), target='prog')
        delta = diff_reports(a, b)
        self.assertEqual(delta.a_only, {NormAddr(0, 1)})
        self.assertEqual(delta.b_only, {NormAddr(0, 0)})
        self.assertEqual(delta.both, {NormAddr(0, 2)})
        self.assertEqual(evaluator.dumps_delta(delta), 'loc_hex,side\n0,b_only\n1,a_only\n2,both\n')
        self.assertTrue(diff_reports(a, a).a_only == frozenset())

    def test_different_targets(self):
        trace = make_trace([(0, b'\x55')])
        view = DisasmView('a', 0, [])
        with self.assertRaises(TargetMismatch):
            diff_reports(evaluate(trace, view, target='x'), evaluate(trace, view, target='y'))
