"""Thin ctypes binding of the Linux ptrace calls the tracer uses."""

import ctypes
import ctypes.util
import os
import platform

from ..exceptions import LaunchFailure, UnsupportedPlatform

PTRACE_TRACEME = 0
PTRACE_PEEKTEXT = 1
PTRACE_POKETEXT = 4
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_SINGLESTEP = 9
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_SETOPTIONS = 0x4200

PTRACE_O_TRACECLONE = 0x8
PTRACE_O_TRACEFORK = 0x2
PTRACE_O_TRACEVFORK = 0x4
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3


class UserRegs(ctypes.Structure):
    """struct user_regs_struct on x86-64"""
    _fields_ = [(name, ctypes.c_ulonglong) for name in (
        'r15', 'r14', 'r13', 'r12', 'rbp', 'rbx', 'r11', 'r10', 'r9', 'r8',
        'rax', 'rcx', 'rdx', 'rsi', 'rdi', 'orig_rax', 'rip', 'cs', 'eflags',
        'rsp', 'ss', 'fs_base', 'gs_base', 'ds', 'es', 'fs', 'gs',
    )]


_libc = None


def host_supported():
    return platform.system() == 'Linux' and platform.machine() in ('x86_64', 'AMD64')


def libc():
    global _libc
    if _libc is None:
        if not host_supported():
            raise UnsupportedPlatform(f"tracing needs Linux x86-64, this host is {platform.system()} {platform.machine()}")
        path = ctypes.util.find_library('c')
        if path is None:
            raise UnsupportedPlatform("libc not found")
        lib = ctypes.CDLL(path, use_errno=True)
        lib.ptrace.argtypes = [ctypes.c_long, ctypes.c_int, ctypes.c_void_p, ctypes.c_void_p]
        lib.ptrace.restype = ctypes.c_long
        _libc = lib
    return _libc


def ptrace(request, pid=0, addr=0, data=0):
    ctypes.set_errno(0)
    result = libc().ptrace(request, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    err = ctypes.get_errno()
    if result == -1 and err:
        raise OSError(err, f"ptrace({request}, {pid}): {os.strerror(err)}")
    return result


def traceme():
    """preexec hook for the child: request tracing by the parent"""
    try:
        ptrace(PTRACE_TRACEME)
    except OSError as e:
        raise LaunchFailure(f"PTRACE_TRACEME failed: {e}")


def get_regs(pid):
    regs = UserRegs()
    ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(regs))
    return regs


def set_regs(pid, regs):
    ptrace(PTRACE_SETREGS, pid, 0, ctypes.addressof(regs))


def single_step(pid, signo=0):
    ptrace(PTRACE_SINGLESTEP, pid, 0, signo)


def cont(pid, signo=0):
    ptrace(PTRACE_CONT, pid, 0, signo)


def kill(pid):
    try:
        ptrace(PTRACE_KILL, pid)
    except OSError:
        pass


def set_options(pid, options):
    ptrace(PTRACE_SETOPTIONS, pid, 0, options)


def peek_word(pid, address):
    return ptrace(PTRACE_PEEKTEXT, pid, address) & 0xffffffffffffffff


def poke_word(pid, address, word):
    ptrace(PTRACE_POKETEXT, pid, address, word)


def available():
    """True when this host can trace children with ptrace"""
    if not host_supported():
        return False
    try:
        libc()
    except UnsupportedPlatform:
        return False
    try:
        with open('/proc/sys/kernel/yama/ptrace_scope') as f:
            return f.read().strip() != '3'
    except OSError:
        return True
