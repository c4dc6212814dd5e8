"""Evaluate many (trace, view) pairs and summarize them per tool."""

import csv
import itertools
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from django.utils import timezone

from . import evaluator, explain, reporting
from .exceptions import BatchError, EmptyBatch, TracebinError
from .ingest import read_view, rebase
from .tracefile import read_trace

logger = logging.getLogger(__name__)

SPEC_COLUMNS = ['trace', 'view', 'tool', 'target']
OUTPUT_FORMATS = ('csv', 'json', 'table')


@dataclass(frozen=True)
class BatchEntry:
    trace_file: str
    view_file: str
    tool: str
    target: str

    @property
    def stem(self):
        return f"{_safe(self.target)}__{_safe(self.tool)}"


@dataclass(frozen=True)
class BatchSpec:
    entries: tuple
    output_dir: str
    format: str = 'csv'

    def __post_init__(self):
        if not self.entries:
            raise EmptyBatch("batch has no entries")
        if self.format not in OUTPUT_FORMATS:
            raise BatchError(f"unknown batch format {self.format!r}")


@dataclass(frozen=True)
class EntryResult:
    target: str
    tool: str
    trace_file: str
    view_file: str
    summary: dict = field(default_factory=dict)
    categories: dict = field(default_factory=dict)
    report_path: str = ''
    explain_path: str = ''
    error: Optional[str] = None


@dataclass
class BatchOutcome:
    results: list
    overall: list
    controlflow: list
    diff_paths: list
    summary_path: str
    controlflow_path: str
    batch_run: object = None

    @property
    def failed(self):
        return [r for r in self.results if r.error]


def _safe(name):
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', name)


def read_batch_spec(path, output_dir, fmt='csv'):
    """Load a batch CSV with columns trace,view,tool,target; paths are relative to the file"""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(row for row in f if row.strip() and not row.startswith('#'))
        missing = set(SPEC_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise BatchError(f"{path}: missing columns {', '.join(sorted(missing))}")
        for row in reader:
            entries.append(BatchEntry(
                trace_file=os.path.join(root, row['trace'].strip()),
                view_file=os.path.join(root, row['view'].strip()),
                tool=row['tool'].strip(),
                target=row['target'].strip(),
            ))
    return BatchSpec(tuple(entries), output_dir, fmt)


def _view_format(path):
    return 'objdump' if path.endswith(('.objdump', '.lst', '.txt')) else 'idf'


def evaluate_entry(entry, output_dir):
    """Evaluate one entry and write its report and explanation files"""
    try:
        trace = read_trace(entry.trace_file)
        view = read_view(entry.view_file, _view_format(entry.view_file), entry.tool)
        view = rebase(view, trace.modules[0] if trace.modules else None)
        report = evaluator.evaluate(trace, view, target=entry.target, tool=entry.tool)
        explanations = explain.explain(trace, view, report)
        categories = explain.categorize(explanations)

        report_path = os.path.join(output_dir, f"{entry.stem}.report.csv")
        explain_path = os.path.join(output_dir, f"{entry.stem}.explain.csv")
        evaluator.write_report(report_path, report)
        explain.write_explanations(explain_path, explanations)
    except (TracebinError, OSError) as e:
        logger.error(f"Error evaluating {entry.tool} on {entry.target}: {e}")
        return EntryResult(entry.target, entry.tool, entry.trace_file, entry.view_file, error=str(e))

    return EntryResult(
        target=entry.target,
        tool=entry.tool,
        trace_file=entry.trace_file,
        view_file=entry.view_file,
        summary=report.summary(),
        categories=categories.as_dict(),
        report_path=report_path,
        explain_path=explain_path,
    )


def _write_diffs(results, output_dir):
    by_target = {}
    for result in results:
        if not result.error:
            by_target.setdefault(result.target, []).append(result)
    paths = []
    for target in sorted(by_target):
        for a, b in itertools.combinations(sorted(by_target[target], key=lambda r: r.tool), 2):
            delta = evaluator.diff_reports(evaluator.read_report(a.report_path), evaluator.read_report(b.report_path))
            path = os.path.join(output_dir, f"{_safe(target)}__{_safe(a.tool)}__vs__{_safe(b.tool)}.diff.csv")
            with open(path, 'w', encoding='utf-8') as f:
                f.write(evaluator.dumps_delta(delta))
            paths.append(path)
    return paths


def _record_ledger(spec, results, spec_path, jobs):
    from .models import BatchRun, EvaluationRecord

    failed = [r for r in results if r.error]
    batch_run = BatchRun.objects.create(
        name=os.path.basename(os.path.normpath(spec.output_dir)),
        spec_path=spec_path or '',
        output_dir=spec.output_dir,
        export_format=spec.format,
        jobs=jobs,
        entry_count=len(results),
        failed_count=len(failed),
    )
    for result in results:
        counts = result.categories
        summary = result.summary
        EvaluationRecord.objects.create(
            batch=batch_run,
            target=result.target,
            tool=result.tool,
            trace_path=result.trace_file,
            view_path=result.view_file,
            status='failed' if result.error else 'ok',
            traced_count=summary.get('traced', 0),
            missing_count=summary.get('missing', 0),
            mismatch_count=summary.get('mismatch', 0),
            total_errors=summary.get('total', 0),
            bucket=summary.get('bucket', ''),
            cbr_count=counts.get('cbr', 0),
            indirect_count=counts.get('indirect', 0),
            direct_count=counts.get('direct', 0),
            return_count=counts.get('return', 0),
            unattributed_count=counts.get('unattributed', 0),
            report_path=result.report_path,
            error_message=result.error or '',
        )
    batch_run.status = 'failed' if failed else 'completed'
    if failed:
        batch_run.error_message = f"{len(failed)} of {len(results)} entries failed"
    batch_run.finished_at = timezone.now()
    batch_run.save()
    return batch_run


def _write_run_info(results, jobs, output_dir, started):
    info = {
        'started_at': started.isoformat(),
        'finished_at': timezone.now().isoformat(),
        'jobs': jobs,
        'entries': len(results),
        'failed': [{'target': r.target, 'tool': r.tool, 'error': r.error} for r in results if r.error],
    }
    with open(os.path.join(output_dir, 'run-info.json'), 'w', encoding='utf-8') as f:
        json.dump(info, f, indent=2)


def run_batch(spec, jobs=1, ledger=True, spec_path=None):
    """Evaluate every entry, then write summary tables, diffs and the sidecar run info.

    Data files depend only on the inputs; timestamps go to run-info.json
    and the ledger.
    """
    started = timezone.now()
    os.makedirs(spec.output_dir, exist_ok=True)

    if jobs > 1 and len(spec.entries) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(evaluate_entry, spec.entries, itertools.repeat(spec.output_dir)))
    else:
        results = [evaluate_entry(entry, spec.output_dir) for entry in spec.entries]

    overall = reporting.overall_rows(results)
    controlflow = reporting.controlflow_rows(results)
    diff_paths = _write_diffs(results, spec.output_dir)
    summary_path = reporting.export(overall, spec.format, os.path.join(spec.output_dir, 'summary'), 'Disassembly errors per tool')
    controlflow_path = reporting.export(
        controlflow, spec.format, os.path.join(spec.output_dir, 'controlflow'), 'Missed instructions by control flow'
    )
    _write_run_info(results, jobs, spec.output_dir, started)

    batch_run = _record_ledger(spec, results, spec_path, jobs) if ledger else None
    failed = sum(1 for r in results if r.error)
    logger.info(f"Batch finished: {len(results) - failed} evaluated, {failed} failed")
    return BatchOutcome(results, overall, controlflow, diff_paths, summary_path, controlflow_path, batch_run)
