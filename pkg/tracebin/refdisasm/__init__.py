"""Reference disassembler: subset decoder, linear sweep and recursive descent."""

from .decoder import ENDBR64, DecodedInst, InstClass, decode_bytes, decode_len, parse
from .disasm import HeuristicConfig, find_endbr, linear_sweep, recursive_descent

__all__ = [
    'ENDBR64',
    'DecodedInst',
    'HeuristicConfig',
    'InstClass',
    'decode_bytes',
    'decode_len',
    'find_endbr',
    'linear_sweep',
    'parse',
    'recursive_descent',
]
