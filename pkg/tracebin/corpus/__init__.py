"""Synthetic fixture binaries with known ground truth."""

from .builder import ImageBuilder, TruthEntry
from .cases import CASES, CorpusCase, case_names, gen
from .elf import build_elf, emit_elf
from .emulator import Emulator, run_elf, run_image

__all__ = [
    'CASES',
    'CorpusCase',
    'Emulator',
    'ImageBuilder',
    'TruthEntry',
    'build_elf',
    'case_names',
    'emit_elf',
    'gen',
    'run_elf',
    'run_image',
]
