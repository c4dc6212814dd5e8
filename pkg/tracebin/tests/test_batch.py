import json
import os
import tempfile
from unittest import mock, skipUnless

from django.test import SimpleTestCase, TestCase

from tracebin import batch, reporting
from tracebin.batch import BatchEntry, BatchSpec, EntryResult, read_batch_spec, run_batch
from tracebin.corpus import gen
from tracebin.exceptions import BatchError, EmptyBatch, EvaluationError
from tracebin.ingest import write_view
from tracebin.models import BatchRun, EvaluationRecord
from tracebin.refdisasm import recursive_descent
from tracebin.tracefile import write_trace

SPEC_CSV = """\
# tools against the corpus
trace,view,tool,target
traces/jump_table.trace,views/jump_table.recursive.idf,recursive,jump_table
traces/jump_table.trace,views/jump_table.truth.idf,truth,jump_table
traces/plt_pattern.trace,views/plt_pattern.recursive.idf,recursive,plt_pattern
traces/jump_table.trace,views/other.idf,truth,broken
"""

OVERALL = [
    {'tool': 'recursive', 'Z': 0, 'A': 2, 'B': 0, 'C': 0, 'D': 0, 'T': 22, 'targets': 2, 'failed': 0},
    {'tool': 'truth', 'Z': 1, 'A': 0, 'B': 0, 'C': 0, 'D': 0, 'T': 0, 'targets': 1, 'failed': 1},
]
CONTROLFLOW = [
    {'tool': 'recursive', 'cbr': 0, 'indirect': 18, 'direct': 0, 'return': 0, 'unattributed': 4},
    {'tool': 'truth', 'cbr': 0, 'indirect': 0, 'direct': 0, 'return': 0, 'unattributed': 0},
]


def build_workspace(root):
    """Traces, views and a batch CSV for jump_table and plt_pattern"""
    os.makedirs(os.path.join(root, 'traces'))
    os.makedirs(os.path.join(root, 'views'))
    for name in ('jump_table', 'plt_pattern'):
        case = gen(name)
        write_trace(os.path.join(root, 'traces', f"{name}.trace"), case.expected_trace)
        write_view(os.path.join(root, 'views', f"{name}.recursive.idf"), recursive_descent(case.image, [case.entry]))
    truth = gen('jump_table').truth_view()
    write_view(os.path.join(root, 'views', 'jump_table.truth.idf'), truth)
    write_view(os.path.join(root, 'views', 'other.idf'), truth.replace(target='other.elf'))
    path = os.path.join(root, 'batch.csv')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(SPEC_CSV)
    return path


def result(tool, total=0, bucket='Z', error=None, **categories):
    summary = {} if error else {'total': total, 'bucket': bucket}
    return EntryResult('t', tool, 'x.trace', 'x.idf', summary, categories, error=error)


class SummaryRowsTest(SimpleTestCase):
    def test_overall_rows(self):
        rows = reporting.overall_rows([
            result('b', 3, 'A'),
            result('a', 0, 'Z'),
            result('a', 500, 'C'),
            result('a', error='boom'),
        ])
        self.assertEqual([r['tool'] for r in rows], ['a', 'b'])
        self.assertEqual(rows[0], {'tool': 'a', 'Z': 1, 'A': 0, 'B': 0, 'C': 1, 'D': 0, 'T': 500, 'targets': 2, 'failed': 1})

    def test_controlflow_rows_skip_failures(self):
        rows = reporting.controlflow_rows([
            result('a', indirect=4, unattributed=1),
            result('a', indirect=2, cbr=3),
            result('b', error='boom'),
        ])
        self.assertEqual(rows, [{'tool': 'a', 'cbr': 3, 'indirect': 6, 'direct': 0, 'return': 0, 'unattributed': 1}])

    def test_render_table(self):
        text = reporting.render_table([{'tool': 'a', 'Z': 1}], 'Summary')
        self.assertEqual(text, 'Summary\ntool  Z\n----  -\na     1\n')
        self.assertEqual(reporting.render_table([], 'Summary'), 'No rows for Summary.\n')

    def test_render_csv_and_json(self):
        data = [{'tool': 'a', 'Z': 1}]
        self.assertEqual(reporting.render(data, 'csv', 'x'), 'tool,Z\na,1\n')
        self.assertEqual(json.loads(reporting.render(data, 'json', 'x')), data)
        with self.assertRaises(EvaluationError):
            reporting.render(data, 'pdf', 'x')


class ExportTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.stem = os.path.join(self.tmp.name, 'summary')
        self.data = [{'tool': 'a', 'Z': 1, 'T': 0}, {'tool': 'b', 'Z': 0, 'T': 7}]

    def tearDown(self):
        self.tmp.cleanup()

    def test_text_formats(self):
        for fmt, ext in (('csv', 'csv'), ('json', 'json'), ('table', 'txt')):
            with self.subTest(fmt=fmt):
                path = reporting.export(self.data, fmt, self.stem, 'Summary')
                self.assertEqual(path, f"{self.stem}.{ext}")
                with open(path, encoding='utf-8') as f:
                    self.assertEqual(f.read(), reporting.render(self.data, fmt, 'Summary'))

    def test_unknown_format(self):
        with self.assertRaises(EvaluationError):
            reporting.export(self.data, 'html', self.stem, 'Summary')

    def test_fallback_to_csv(self):
        for fmt, flag in (('excel', 'EXCEL_AVAILABLE'), ('pdf', 'PDF_AVAILABLE')):
            with self.subTest(fmt=fmt), mock.patch.object(reporting, flag, False):
                with self.assertLogs('tracebin.reporting', 'WARNING'):
                    path = reporting.export(self.data, fmt, self.stem, 'Summary')
                self.assertEqual(path, f"{self.stem}.csv")

    @skipUnless(reporting.EXCEL_AVAILABLE, 'openpyxl is not installed')
    def test_excel(self):
        from openpyxl import load_workbook

        path = reporting.export(self.data, 'excel', self.stem, 'summary')
        sheet = load_workbook(path).active
        self.assertEqual(sheet.title, 'Summary')
        self.assertEqual([c.value for c in sheet[1]], ['tool', 'Z', 'T'])
        self.assertEqual(sheet['C3'].value, 7)
        self.assertEqual(sheet['A4'].value, 'Total')
        self.assertEqual(sheet['C4'].value, '=SUM(C2:C3)')

    @skipUnless(reporting.PDF_AVAILABLE, 'reportlab is not installed')
    def test_pdf(self):
        path = reporting.export(self.data, 'pdf', self.stem, 'Summary', subtitle='corpus')
        with open(path, 'rb') as f:
            self.assertEqual(f.read(5), b'%PDF-')


class BatchSpecTest(SimpleTestCase):
    def test_read_spec_resolves_paths(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = build_workspace(tmp)
            spec = read_batch_spec(path, os.path.join(tmp, 'out'))
        self.assertEqual(len(spec.entries), 4)
        first = spec.entries[0]
        self.assertEqual(first.trace_file, os.path.join(tmp, 'traces', 'jump_table.trace'))
        self.assertEqual((first.tool, first.target), ('recursive', 'jump_table'))
        self.assertEqual(first.stem, 'jump_table__recursive')

    def test_bad_specs(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'batch.csv')
            with open(path, 'w', encoding='utf-8') as f:
                f.write('trace,view,tool\na,b,c\n')
            with self.assertRaises(BatchError):
                read_batch_spec(path, tmp)
            with open(path, 'w', encoding='utf-8') as f:
                f.write('trace,view,tool,target\n')
            with self.assertRaises(EmptyBatch):
                read_batch_spec(path, tmp)
        entry = BatchEntry('a', 'b', 'c', 'd')
        with self.assertRaises(BatchError):
            BatchSpec((entry,), tmp, 'excel')

    def test_stem_is_file_safe(self):
        self.assertEqual(BatchEntry('a', 'b', 'ida pro/7', 'libc.so.6').stem, 'libc.so.6__ida_pro_7')


class RunBatchTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.tmp.name, 'out')
        self.spec_path = build_workspace(self.tmp.name)
        self.spec = read_batch_spec(self.spec_path, self.out)

    def tearDown(self):
        self.tmp.cleanup()

    def test_tables_and_artifacts(self):
        outcome = run_batch(self.spec, spec_path=self.spec_path)
        self.assertEqual(outcome.overall, OVERALL)
        self.assertEqual(outcome.controlflow, CONTROLFLOW)
        self.assertEqual([(r.tool, r.target) for r in outcome.failed], [('truth', 'broken')])
        self.assertIn('other.elf', outcome.failed[0].error)

        self.assertEqual(outcome.summary_path, os.path.join(self.out, 'summary.csv'))
        self.assertEqual([os.path.basename(p) for p in outcome.diff_paths],
                         ['jump_table__recursive__vs__truth.diff.csv'])
        for name in ('jump_table__recursive.report.csv', 'jump_table__recursive.explain.csv',
                     'plt_pattern__recursive.report.csv', 'controlflow.csv'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)
        self.assertFalse(os.path.exists(os.path.join(self.out, 'broken__truth.report.csv')))

        with open(os.path.join(self.out, 'run-info.json'), encoding='utf-8') as f:
            info = json.load(f)
        self.assertEqual(info['entries'], 4)
        self.assertEqual([item['target'] for item in info['failed']], ['broken'])

    def test_ledger(self):
        outcome = run_batch(self.spec, spec_path=self.spec_path)
        run = outcome.batch_run
        self.assertEqual(BatchRun.objects.count(), 1)
        self.assertEqual((run.status, run.entry_count, run.failed_count, run.succeeded_count), ('failed', 4, 1, 3))
        self.assertEqual(run.name, 'out')
        self.assertIsNotNone(run.finished_at)

        record = EvaluationRecord.objects.get(tool='recursive', target='jump_table')
        self.assertEqual((record.total_errors, record.bucket, record.indirect_count), (14, 'A', 14))
        self.assertEqual(EvaluationRecord.objects.get(target='broken').status, 'failed')

        self.assertEqual(reporting.ledger_rows(run), (OVERALL, CONTROLFLOW))

    def test_ledger_can_be_skipped(self):
        outcome = run_batch(self.spec, ledger=False)
        self.assertIsNone(outcome.batch_run)
        self.assertEqual(BatchRun.objects.count(), 0)

    def test_results_do_not_depend_on_worker_count(self):
        serial = run_batch(self.spec, ledger=False)
        with open(serial.summary_path, encoding='utf-8') as f:
            expected = f.read()
        parallel = run_batch(batch.BatchSpec(self.spec.entries, os.path.join(self.tmp.name, 'par')), jobs=2, ledger=False)
        self.assertEqual(parallel.overall, serial.overall)
        with open(parallel.summary_path, encoding='utf-8') as f:
            self.assertEqual(f.read(), expected)
