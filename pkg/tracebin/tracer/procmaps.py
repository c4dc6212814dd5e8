"""Module table of a live process, from /proc/<pid>/maps and the ELF files behind it."""

import logging
import os
from dataclasses import dataclass

from elftools.common.exceptions import ELFError
from elftools.elf.constants import P_FLAGS
from elftools.elf.elffile import ELFFile

from ..core import ModuleInfo

logger = logging.getLogger(__name__)

PAGE_MASK = ~0xfff


@dataclass(frozen=True)
class Mapping:
    start: int
    end: int
    perms: str
    offset: int
    path: str

    @property
    def executable(self):
        return 'x' in self.perms


def parse_maps(text):
    mappings = []
    for line in text.splitlines():
        parts = line.split(None, 5)
        if len(parts) < 5:
            continue
        start, end = (int(value, 16) for value in parts[0].split('-'))
        path = parts[5].strip() if len(parts) == 6 else ''
        mappings.append(Mapping(start, end, parts[1], int(parts[2], 16), path))
    return mappings


def read_maps(pid):
    with open(f'/proc/{pid}/maps') as f:
        return parse_maps(f.read())


def text_range(path):
    """(text_start, text_size) of a file's executable load segments, relative to its link base"""
    try:
        with open(path, 'rb') as f:
            elf = ELFFile(f)
            loads = [seg for seg in elf.iter_segments() if seg['p_type'] == 'PT_LOAD']
            if not loads:
                return None
            link_base = min(seg['p_vaddr'] & PAGE_MASK for seg in loads)
            code = [seg for seg in loads if seg['p_flags'] & P_FLAGS.PF_X]
            if not code:
                return None
            start = min(seg['p_vaddr'] for seg in code) - link_base
            end = max(seg['p_vaddr'] + seg['p_memsz'] for seg in code) - link_base
            return start, end - start
    except (OSError, ELFError) as e:
        logger.debug(f"Cannot read program headers of {path}: {e}")
        return None


def build_modules(mappings, main_path=None):
    """One ModuleInfo per mapped file with executable pages.

    The main program gets id 0, other modules follow in load order.
    """
    by_path = {}
    for mapping in mappings:
        if not mapping.path.startswith('/'):
            continue
        by_path.setdefault(mapping.path, []).append(mapping)

    ordered = sorted(
        (path for path, maps in by_path.items() if any(m.executable for m in maps)),
        key=lambda path: (path != main_path, min(m.start for m in by_path[path])),
    )
    modules = []
    for module_id, path in enumerate(ordered):
        maps = by_path[path]
        base = min(m.start for m in maps)
        span = text_range(path)
        if span is None:
            code = [m for m in maps if m.executable]
            start = min(m.start for m in code) - base
            span = (start, max(m.end for m in code) - base - start)
        modules.append(ModuleInfo(module_id, path, base, span[0], span[1]))
    return modules


def resolve_main(path):
    return os.path.realpath(path)
