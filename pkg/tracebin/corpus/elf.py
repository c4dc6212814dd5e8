"""Minimal static ELF64 executables for corpus images.

The image is placed at file offset 0x1000 and mapped alone at the load
base, so module offsets in a trace equal image offsets.
"""

import logging
import struct

from ..exceptions import ImageTooLarge

logger = logging.getLogger(__name__)

PAGE_SIZE = 0x1000
DEFAULT_BASE = 0x400000

ELF_HEADER = struct.Struct('<16sHHIQQQIHHHHHH')
PROGRAM_HEADER = struct.Struct('<IIQQQQQQ')

ET_EXEC = 2
EM_X86_64 = 0x3e
PT_LOAD = 1
PF_RWX = 0x7


def build_elf(image, entry, base=DEFAULT_BASE):
    if len(image) > PAGE_SIZE:
        raise ImageTooLarge(f"image of {len(image)} bytes exceeds one page")
    if base % PAGE_SIZE:
        raise ValueError(f"load base {base:#x} is not page aligned")
    if not 0 <= entry < len(image):
        raise ValueError(f"entry {entry:#x} lies outside the image")

    ident = b'\x7fELF' + bytes([2, 1, 1, 0]) + bytes(8)
    header = ELF_HEADER.pack(
        ident,
        ET_EXEC,
        EM_X86_64,
        1,
        base + entry,
        ELF_HEADER.size,
        0,
        0,
        ELF_HEADER.size,
        PROGRAM_HEADER.size,
        1,
        64,
        0,
        0,
    )
    # writable as well: plt_pattern patches its own GOT slot
    segment = PROGRAM_HEADER.pack(
        PT_LOAD,
        PF_RWX,
        PAGE_SIZE,
        base,
        base,
        len(image),
        len(image),
        PAGE_SIZE,
    )
    prefix = header + segment
    elf = prefix + bytes(PAGE_SIZE - len(prefix)) + bytes(image)
    logger.debug(f"Built ELF: {len(image)} byte image at {base:#x}, entry {base + entry:#x}")
    return elf


def emit_elf(case, base=DEFAULT_BASE):
    return build_elf(case.image, case.entry, base)


def image_file_offset(module_offset):
    return PAGE_SIZE + module_offset
