import logging
import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from tracebin import batch, evaluator, experiments, explain, patchlab, reporting
from tracebin.core import merge
from tracebin.corpus import CASES, emit_elf, gen
from tracebin.corpus.emulator import DEFAULT_BASE, load_elf
from tracebin.exceptions import TracebinError, UnsupportedPlatform
from tracebin.ingest import PRESETS, preset_base, read_view, rebase, write_view
from tracebin.refdisasm import HeuristicConfig, linear_sweep, recursive_descent
from tracebin.tracefile import read_trace, write_trace

logger = logging.getLogger(__name__)

ELF_MAGIC = b'\x7fELF'
TEXT_FORMATS = ('table', 'csv', 'json')


def hex_int(text):
    return int(text, 16)


def _read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def _write_bytes(path, data, executable=False):
    with open(path, 'wb') as f:
        f.write(data)
    if executable:
        os.chmod(path, 0o755)


def _image_of(path):
    """Raw image bytes of a .img file, or the loaded segment of an ELF"""
    data = _read_bytes(path)
    if data.startswith(ELF_MAGIC):
        image, _, _ = load_elf(data)
        return image
    return data


def _view_format(path, fmt):
    if fmt:
        return fmt
    return 'objdump' if path.endswith(('.objdump', '.lst', '.txt')) else 'idf'


class Command(BaseCommand):
    help = 'Evaluate disassembler output against execution traces'

    def add_arguments(self, parser):
        sub = parser.add_subparsers(dest='command', required=True)

        trace = sub.add_parser('trace', help='Single-step a program and write its unique instruction trace')
        trace.add_argument('--out', required=True)
        trace.add_argument('--timeout', type=int, default=settings.TRACEBIN_TRACE_TIMEOUT)
        trace.add_argument('--main-module-only', dest='main_module_only', action='store_true',
                           default=settings.TRACEBIN_MAIN_MODULE_ONLY)
        trace.add_argument('--all-modules', dest='main_module_only', action='store_false')
        trace.add_argument('--no-block-skip', dest='block_skip', action='store_false',
                           default=settings.TRACEBIN_BLOCK_SKIP)
        trace.add_argument('--stdin', dest='stdin_file')
        trace.add_argument('--env', action='append', default=[], metavar='KEY=VALUE')
        trace.add_argument('program')
        trace.add_argument('program_args', nargs='*')

        ingest = sub.add_parser('ingest', help='Convert disassembler output into the interchange format')
        ingest.add_argument('input')
        ingest.add_argument('--format', dest='view_format', choices=['objdump', 'idf'], default='idf')
        ingest.add_argument('--preset', choices=sorted(PRESETS))
        ingest.add_argument('--base', type=hex_int)
        ingest.add_argument('--tool')
        ingest.add_argument('--target')
        ingest.add_argument('--out', required=True)

        merge_parser = sub.add_parser('merge', help='Union several traces of the same binary')
        merge_parser.add_argument('traces', nargs='+')
        merge_parser.add_argument('--out', required=True)

        ev = sub.add_parser('eval', help='Report traced instructions the view misses or gets wrong')
        self._add_trace_view(ev)
        ev.add_argument('--module', type=int)
        ev.add_argument('--out', required=True)
        ev.add_argument('--json', action='store_true')

        ex = sub.add_parser('explain', help='Attribute missed instructions to control flow')
        self._add_trace_view(ex)
        ex.add_argument('--report', required=True)
        ex.add_argument('--out', required=True)

        ref = sub.add_parser('refdisasm', help='Run the reference disassembler over an image')
        ref.add_argument('--image', required=True)
        ref.add_argument('--mode', choices=['linear', 'recursive'], required=True)
        ref.add_argument('--entry', type=hex_int, action='append', default=[])
        ref.add_argument('--endbr', action='store_true')
        ref.add_argument('--epilogue-stop', action='store_true')
        ref.add_argument('--no-skip-byte', dest='skip_byte', action='store_false')
        ref.add_argument('--noreturn', type=hex_int, action='append', default=[])
        ref.add_argument('--target')
        ref.add_argument('--out', required=True)

        corpus = sub.add_parser('corpus', help='Synthetic binaries with known ground truth')
        corpus_sub = corpus.add_subparsers(dest='corpus_command', required=True)
        corpus_gen = corpus_sub.add_parser('gen')
        corpus_gen.add_argument('name', choices=list(CASES))
        corpus_gen.add_argument('--out-dir', required=True)
        corpus_gen.add_argument('--base', type=hex_int, default=DEFAULT_BASE)
        corpus_gen.add_argument('--args', nargs='*', default=[], dest='run_args')
        corpus_sub.add_parser('list')

        patch = sub.add_parser('patch', help='Trojan proofs of concept')
        patch_sub = patch.add_subparsers(dest='patch_command', required=True)
        plan = patch_sub.add_parser('plan')
        self._add_trace_view(plan)
        plan.add_argument('--image', required=True)
        plan.add_argument('--marker', choices=[m.value for m in patchlab.Marker])
        plan.add_argument('--desync', action='store_true')
        plan.add_argument('--out', required=True)
        apply = patch_sub.add_parser('apply')
        apply.add_argument('--plans', required=True)
        apply.add_argument('--index', type=int, default=0)
        apply.add_argument('--input', required=True)
        apply.add_argument('--out', required=True)
        verify = patch_sub.add_parser('verify')
        verify.add_argument('--plans', required=True)
        verify.add_argument('--index', type=int, default=0)
        verify.add_argument('--elf', required=True)
        verify.add_argument('--view', required=True)
        verify.add_argument('--view-format', choices=['objdump', 'idf'])
        verify.add_argument('--runner', choices=['live', 'emulator'], default='live')
        verify.add_argument('--timeout', type=int, default=settings.TRACEBIN_TRACE_TIMEOUT)
        verify.add_argument('--args', nargs='*', default=[], dest='run_args')

        run = sub.add_parser('batch', help='Evaluate many (trace, view) pairs')
        run.add_argument('spec')
        run.add_argument('--out-dir', required=True)
        run.add_argument('--format', dest='batch_format', choices=batch.OUTPUT_FORMATS, default='csv')
        run.add_argument('--jobs', type=int, default=settings.TRACEBIN_JOBS)
        run.add_argument('--no-ledger', dest='ledger', action='store_false')

        report = sub.add_parser('report', help='Aggregate the batch ledger per tool')
        report.add_argument('--batch', type=int, dest='batch_id')
        report.add_argument('--format', dest='report_format', choices=reporting.FORMATS, default='table')
        report.add_argument('--out', help='path stem; required for excel and pdf')

        experiment = sub.add_parser('experiment', help='Heuristic comparisons over the corpus')
        experiment.add_argument('name', choices=list(experiments.EXPERIMENTS))
        experiment.add_argument('--format', dest='experiment_format', choices=TEXT_FORMATS, default='table')

    def _add_trace_view(self, parser):
        parser.add_argument('--trace', required=True)
        parser.add_argument('--view', required=True)
        parser.add_argument('--view-format', choices=['objdump', 'idf'])
        parser.add_argument('--tool')
        parser.add_argument('--target')

    def execute(self, *args, **options):
        if not options.get('no_color') and not options.get('force_color'):
            if settings.TRACEBIN_COLOR is True:
                options['force_color'] = True
            elif settings.TRACEBIN_COLOR is False:
                options['no_color'] = True
        return super().execute(*args, **options)

    def handle(self, *args, **options):
        command = options['command']
        handler = getattr(self, f"handle_{command}")
        try:
            handler(options)
        except UnsupportedPlatform as e:
            raise CommandError(str(e), returncode=2)
        except (TracebinError, OSError) as e:
            raise CommandError(f'Error in {command}: {e}')

    # Subcommands

    def handle_trace(self, options):
        from tracebin.tracer import RunSpec, collect_outcome, tracer_available

        if not tracer_available():
            raise CommandError('tracing needs Linux x86-64 with ptrace enabled', returncode=2)
        spec = RunSpec(
            program_path=options['program'],
            args=tuple(options['program_args']),
            env=tuple(options['env']),
            stdin_file=options['stdin_file'],
            timeout_s=options['timeout'],
        )
        outcome = collect_outcome(spec, options['main_module_only'], options['block_skip'])
        write_trace(options['out'], outcome.trace)
        if outcome.partial:
            self.stdout.write(self.style.WARNING(f"Trace is partial (timed out after {options['timeout']}s)"))
        self.stdout.write(self.style.SUCCESS(
            f"Traced {len(outcome.trace)} unique instructions, {len(outcome.trace.edges)} edges "
            f"(exit {outcome.exit_code}) -> {options['out']}"
        ))

    def handle_ingest(self, options):
        view = read_view(options['input'], options['view_format'], options['tool'])
        if options['preset']:
            view = view.replace(declared_base=preset_base(options['preset']))
        if options['base'] is not None:
            view = view.replace(declared_base=options['base'])
        if options['tool']:
            view = view.replace(source_name=options['tool'])
        if options['target']:
            view = view.replace(target=options['target'])
        write_view(options['out'], view)
        overlaps = len(view.overlapping_pairs())
        if overlaps:
            self.stdout.write(self.style.WARNING(f"{overlaps} overlapping record pairs"))
        self.stdout.write(self.style.SUCCESS(f"Ingested {len(view)} records -> {options['out']}"))

    def handle_merge(self, options):
        merged = merge(read_trace(path) for path in options['traces'])
        write_trace(options['out'], merged)
        self.stdout.write(self.style.SUCCESS(
            f"Merged {len(options['traces'])} traces: {len(merged)} unique instructions -> {options['out']}"
        ))

    def _load_pair(self, options):
        trace = read_trace(options['trace'])
        view = read_view(options['view'], _view_format(options['view'], options['view_format']), options['tool'])
        module = trace.module(options['module']) if options.get('module') is not None else None
        if module is None and trace.modules:
            module = trace.modules[0]
        return trace, rebase(view, module)

    def handle_eval(self, options):
        trace, view = self._load_pair(options)
        report = evaluator.evaluate(trace, view, options['target'], options['tool'], options['module'])
        evaluator.write_report(options['out'], report, as_json=options['json'])
        style = self.style.SUCCESS if report.total == 0 else self.style.WARNING
        self.stdout.write(style(
            f"{report.tool} on {report.target}: {report.traced_count} traced, {report.missing_count} missing, "
            f"{report.mismatch_count} mismatched (bucket {report.bucket})"
        ))

    def handle_explain(self, options):
        trace, view = self._load_pair(options)
        report = evaluator.read_report(options['report'])
        explanations = explain.explain(trace, view, report)
        explain.write_explanations(options['out'], explanations)
        counts = explain.categorize(explanations)
        self.stdout.write(self.style.SUCCESS(f"Explained {counts.total} missed instructions in {len(explanations)} blocks"))
        for key, value in counts.as_dict().items():
            self.stdout.write(f"  {key}: {value}")

    def handle_refdisasm(self, options):
        image = _image_of(options['image'])
        cfg = HeuristicConfig(
            endbr_scan=options['endbr'],
            epilogue_stop=options['epilogue_stop'],
            skip_byte_on_invalid=options['skip_byte'],
            noreturn_targets=frozenset(options['noreturn']),
        )
        entries = options['entry'] or [0]
        if options['mode'] == 'linear':
            view = linear_sweep(image, entries[0], cfg)
        else:
            view = recursive_descent(image, entries, cfg)
        if options['target']:
            view = view.replace(target=options['target'])
        write_view(options['out'], view)
        self.stdout.write(self.style.SUCCESS(f"{options['mode']} disassembly: {len(view)} instructions -> {options['out']}"))

    def handle_corpus(self, options):
        if options['corpus_command'] == 'list':
            for name, factory in CASES.items():
                _, description, _ = factory()
                self.stdout.write(f"{name:16} {description}")
            return

        name = options['name']
        out_dir = options['out_dir']
        os.makedirs(out_dir, exist_ok=True)
        case = gen(name, tuple(options['run_args']))
        stem = os.path.join(out_dir, name)
        _write_bytes(f"{stem}.img", case.image)
        write_view(f"{stem}.truth.idf", case.truth_view())
        write_trace(f"{stem}.trace", case.expected_trace)
        _write_bytes(f"{stem}.elf", emit_elf(case, options['base']), executable=True)
        self.stdout.write(self.style.SUCCESS(
            f"Generated {name}: {len(case.image)} bytes, {len(case.ground_truth)} instructions, "
            f"{len(case.expected_trace)} traced -> {out_dir}"
        ))

    def handle_patch(self, options):
        getattr(self, f"_patch_{options['patch_command']}")(options)

    def _patch_plan(self, options):
        trace, view = self._load_pair(options)
        report = evaluator.evaluate(trace, view, options['target'], options['tool'])
        explanations = explain.explain(trace, view, report)
        marker = patchlab.Marker(options['marker']) if options['marker'] else None
        plans = patchlab.plan(
            report, explanations, _image_of(options['image']), marker=marker, trace=trace, desync=options['desync']
        )
        patchlab.write_plans(options['out'], plans)
        for index, item in enumerate(plans):
            self.stdout.write(
                f"  [{index}] {item.target_loc} {item.marker.value} {item.rationale.value} "
                f"({item.missed_inst_count} missed)"
            )
        self.stdout.write(self.style.SUCCESS(f"Planned {len(plans)} patches -> {options['out']}"))

    def _selected_plan(self, options):
        plans = patchlab.read_plans(options['plans'])
        if not 0 <= options['index'] < len(plans):
            raise CommandError(f"plan index {options['index']} out of range (0..{len(plans) - 1})", returncode=2)
        return plans[options['index']]

    def _patch_apply(self, options):
        item = self._selected_plan(options)
        data = _read_bytes(options['input'])
        if data.startswith(ELF_MAGIC):
            _write_bytes(options['out'], patchlab.apply_to_elf(data, item), executable=True)
        else:
            _write_bytes(options['out'], patchlab.apply(data, item))
        self.stdout.write(self.style.SUCCESS(f"Patched {item.target_loc} with {item.marker.value} -> {options['out']}"))

    def _patch_verify(self, options):
        item = self._selected_plan(options)
        if options['runner'] == 'emulator':
            runner = patchlab.emulator_runner
        else:
            from tracebin.tracer import tracer_available

            if not tracer_available():
                raise CommandError('live verification needs Linux x86-64 with ptrace enabled', returncode=2)

            def runner(elf_bytes, args):
                return patchlab.live_runner(elf_bytes, args, options['timeout'])

        view = read_view(options['view'], _view_format(options['view'], options['view_format']))
        view = rebase(view)
        verdict = patchlab.verify(_read_bytes(options['elf']), view, item, tuple(options['run_args']), runner)
        style = self.style.SUCCESS if verdict is patchlab.Verdict.HIDDEN_AND_REACHED else self.style.WARNING
        self.stdout.write(style(f"{item.target_loc}: {verdict.value}"))

    def handle_batch(self, options):
        spec = batch.read_batch_spec(options['spec'], options['out_dir'], options['batch_format'])
        outcome = batch.run_batch(spec, jobs=max(1, options['jobs']), ledger=options['ledger'], spec_path=options['spec'])
        self.stdout.write(reporting.render_table(outcome.overall, 'Disassembly errors per tool'))
        self.stdout.write(reporting.render_table(outcome.controlflow, 'Missed instructions by control flow'))
        if outcome.failed:
            for result in outcome.failed:
                self.stderr.write(f"{result.tool} on {result.target}: {result.error}")
            raise CommandError(f"{len(outcome.failed)} of {len(outcome.results)} entries failed")
        self.stdout.write(self.style.SUCCESS(f"Evaluated {len(outcome.results)} entries -> {spec.output_dir}"))

    def handle_report(self, options):
        from tracebin.models import BatchRun

        batch_run = None
        if options['batch_id'] is not None:
            try:
                batch_run = BatchRun.objects.get(pk=options['batch_id'])
            except BatchRun.DoesNotExist:
                raise CommandError(f"no batch run with id {options['batch_id']}")
        overall, controlflow = reporting.ledger_rows(batch_run)
        fmt = options['report_format']
        subtitle = str(batch_run) if batch_run else 'all batch runs'

        if options['out']:
            for rows, suffix, title in (
                (overall, 'overall', 'Disassembly errors per tool'),
                (controlflow, 'controlflow', 'Missed instructions by control flow'),
            ):
                path = reporting.export(rows, fmt, f"{options['out']}-{suffix}", title, subtitle)
                self.stdout.write(self.style.SUCCESS(f"Wrote {path}"))
            return
        if fmt not in TEXT_FORMATS:
            raise CommandError(f"--format {fmt} needs --out", returncode=2)
        self.stdout.write(reporting.render(overall, fmt, 'Disassembly errors per tool'))
        self.stdout.write(reporting.render(controlflow, fmt, 'Missed instructions by control flow'))

    def handle_experiment(self, options):
        rows = experiments.EXPERIMENTS[options['name']]()
        self.stdout.write(reporting.render(rows, options['experiment_format'], f"{options['name']} experiment"))
