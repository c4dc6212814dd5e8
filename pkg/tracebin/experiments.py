"""Heuristic comparisons over the corpus.

`cet` compares how many traced instructions the reference disassembler
misses on the jump table case built with and without endbr64 landing
pads. `desync` shows how a linear sweep loses and regains alignment on
data placed inside code.
"""

import logging

from . import evaluator
from .corpus import gen
from .refdisasm import HeuristicConfig, linear_sweep, recursive_descent

logger = logging.getLogger(__name__)

CET_CASES = ('jump_table', 'jump_table_cet')


def _sweep(case, cfg):
    return linear_sweep(case.image, 0, cfg)


def _descent(case, cfg):
    return recursive_descent(case.image, [case.entry], cfg)


CET_CONFIGS = (
    ('linear', _sweep, HeuristicConfig()),
    ('recursive', _descent, HeuristicConfig()),
    ('recursive+endbr', _descent, HeuristicConfig(endbr_scan=True)),
)

DESYNC_CONFIGS = (
    ('linear', _sweep, HeuristicConfig(skip_byte_on_invalid=True)),
    ('linear-stop', _sweep, HeuristicConfig(skip_byte_on_invalid=False)),
    ('recursive', _descent, HeuristicConfig()),
)


def _evaluate(case, label, disassemble, cfg):
    view = disassemble(case, cfg)
    return evaluator.evaluate(case.expected_trace, view, target=case.name, tool=label)


def cet():
    """Missing instructions per (case, configuration)"""
    rows = []
    for name in CET_CASES:
        case = gen(name)
        for label, disassemble, cfg in CET_CONFIGS:
            report = _evaluate(case, label, disassemble, cfg)
            rows.append({
                'case': name,
                'config': label,
                'traced': report.traced_count,
                'missing': report.missing_count,
                'mismatch': report.mismatch_count,
            })
    logger.info(f"cet experiment: {len(rows)} rows")
    return rows


def desync(case_name='data_in_code'):
    """Missing instructions per sweep configuration, with the labels they fall under"""
    case = gen(case_name)
    rows = []
    for label, disassemble, cfg in DESYNC_CONFIGS:
        report = _evaluate(case, label, disassemble, cfg)
        missed = sorted(e.loc.offset for e in report.errors)
        rows.append({
            'config': label,
            'traced': report.traced_count,
            'missing': report.missing_count,
            'mismatch': report.mismatch_count,
            'offsets': ' '.join(f"{offset:x}" for offset in missed),
            'mnemonics': ' '.join(case.truth_at(offset).mnemonic.split()[0] for offset in missed),
        })
    return rows


EXPERIMENTS = {
    'cet': cet,
    'desync': desync,
}
