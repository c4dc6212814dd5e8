"""Line-based trace file format.

    M <module-id-dec> <path> <base-hex> <text-start-hex> <text-size-hex>
    I <module-id-dec> <offset-hex> <len-dec> <bytes-hex>
    E <C|D|I|R> <mod>:<off-hex> <mod>:<off-hex>
    B <module-id-dec> <offset-hex>

Lines may come in any order. A `# partial` line marks a trace cut short by
a timeout; any other line starting with `#` is a comment.
"""

import logging
import re

from .core import EdgeKind, EdgeRecord, InstRecord, ModuleInfo, NormAddr, TraceSet
from .exceptions import TraceFormatError, TraceSetError

logger = logging.getLogger(__name__)

PARTIAL_MARKER = '# partial'

_HEX = re.compile(r'^[0-9a-f]+$')
_KINDS = {kind.value: kind for kind in EdgeKind}


def _hex(token, lineno, what):
    if not _HEX.match(token):
        raise TraceFormatError(lineno, f"{what} is not lowercase hex: {token!r}")
    return int(token, 16)


def _dec(token, lineno, what):
    if not token.isdigit():
        raise TraceFormatError(lineno, f"{what} is not a decimal number: {token!r}")
    return int(token, 10)


def _addr(token, lineno):
    module_id, sep, offset = token.partition(':')
    if not sep:
        raise TraceFormatError(lineno, f"expected <mod>:<off-hex>, got {token!r}")
    return NormAddr(_dec(module_id, lineno, 'module id'), _hex(offset, lineno, 'offset'))


def loads(text):
    """Parse trace file text into a validated TraceSet"""
    modules = []
    insts = []
    edges = []
    leaders = []
    partial = False

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip('\r')
        if not line.strip():
            continue
        if line.startswith('#'):
            partial = partial or line.strip() == PARTIAL_MARKER
            continue

        tag, _, rest = line.partition(' ')
        try:
            if tag == 'M':
                module_id, _, tail = rest.partition(' ')
                parts = tail.rsplit(' ', 3)
                if len(parts) != 4 or not parts[0]:
                    raise TraceFormatError(lineno, "module line needs id, path, base, text start and size")
                path, base, start, size = parts
                modules.append(ModuleInfo(
                    _dec(module_id, lineno, 'module id'),
                    path,
                    _hex(base, lineno, 'base'),
                    _hex(start, lineno, 'text start'),
                    _hex(size, lineno, 'text size'),
                ))
            elif tag == 'I':
                fields = rest.split()
                if len(fields) != 4:
                    raise TraceFormatError(lineno, "instruction line needs module, offset, length and bytes")
                loc = NormAddr(_dec(fields[0], lineno, 'module id'), _hex(fields[1], lineno, 'offset'))
                if not _HEX.match(fields[3]) or len(fields[3]) % 2:
                    raise TraceFormatError(lineno, f"bad instruction bytes {fields[3]!r}")
                insts.append(InstRecord(loc, _dec(fields[2], lineno, 'length'), bytes.fromhex(fields[3])))
            elif tag == 'E':
                fields = rest.split()
                if len(fields) != 3 or fields[0] not in _KINDS:
                    raise TraceFormatError(lineno, "edge line needs kind C|D|I|R, source and destination")
                edges.append(EdgeRecord(_addr(fields[1], lineno), _addr(fields[2], lineno), _KINDS[fields[0]]))
            elif tag == 'B':
                fields = rest.split()
                if len(fields) != 2:
                    raise TraceFormatError(lineno, "leader line needs module and offset")
                leaders.append(NormAddr(_dec(fields[0], lineno, 'module id'), _hex(fields[1], lineno, 'offset')))
            else:
                raise TraceFormatError(lineno, f"unknown record type {tag!r}")
        except TraceFormatError:
            raise
        except TraceSetError as e:
            raise TraceFormatError(lineno, str(e))

    return TraceSet.build(modules, insts, edges, leaders, partial=partial)


def dumps(trace):
    """Serialize a TraceSet in canonical (sorted) order"""
    lines = []
    if trace.partial:
        lines.append(PARTIAL_MARKER)
    for m in trace.modules:
        lines.append(f"M {m.module_id} {m.path} {m.runtime_base:x} {m.text_start:x} {m.text_size:x}")
    for rec in trace.sorted_insts():
        lines.append(f"I {rec.loc.module_id} {rec.loc.offset:x} {rec.length} {rec.raw.hex()}")
    for edge in trace.sorted_edges():
        lines.append(f"E {edge.kind.value} {edge.src} {edge.dst}")
    for leader in sorted(trace.leaders):
        lines.append(f"B {leader.module_id} {leader.offset:x}")
    return '\n'.join(lines) + '\n'


def read_trace(path):
    with open(path, encoding='utf-8') as f:
        trace = loads(f.read())
    logger.info(f"Loaded trace {path}: {len(trace)} instructions, {len(trace.edges)} edges")
    return trace


def write_trace(path, trace):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps(trace))
    logger.info(f"Wrote trace {path}: {len(trace)} instructions")
