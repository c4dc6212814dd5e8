"""Collect a TraceSet from a live run by single-stepping the target.

Every distinct instruction is read from target memory the first time it
executes. Once a runtime block has been stepped through to its closing
transfer, later visits run it at full speed up to that transfer with a
temporary int3, so a loop costs single-steps only on its first iteration.
"""

import logging
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Optional

from ..core import EdgeKind, EdgeRecord, InstRecord, MAX_INST_LEN, NormAddr, TraceOutcome, TraceSet
from ..exceptions import (
    DecodeError,
    LaunchFailure,
    MultiThreadedTarget,
    SelfModifyingDetected,
    UndecodableInstruction,
    UnsupportedPlatform,
)
from ..refdisasm.decoder import InstClass, decode_bytes, parse
from . import ptrace
from .procmaps import build_modules, read_maps, resolve_main

logger = logging.getLogger(__name__)

INT3 = 0xcc

_EDGE_KINDS = {
    InstClass.CBR: EdgeKind.CBR,
    InstClass.DIRECT_JMP: EdgeKind.DIRECT,
    InstClass.DIRECT_CALL: EdgeKind.DIRECT,
    InstClass.INDIRECT: EdgeKind.INDIRECT,
    InstClass.RETURN: EdgeKind.RETURN,
}


@dataclass(frozen=True)
class RunSpec:
    program_path: str
    args: tuple = ()
    env: tuple = ()
    stdin_file: Optional[str] = None
    timeout_s: int = 30

    def __post_init__(self):
        if self.timeout_s < 1:
            raise LaunchFailure(f"timeout must be at least 1 second, got {self.timeout_s}")
        if not os.path.isfile(self.program_path) or not os.access(self.program_path, os.X_OK):
            raise LaunchFailure(f"{self.program_path} is not an executable file")
        for item in self.env:
            if '=' not in item:
                raise LaunchFailure(f"environment entry {item!r} is not KEY=VALUE")

    def environment(self):
        if not self.env:
            return None
        return dict(item.split('=', 1) for item in self.env)


def classify_transfer(inst_bytes):
    try:
        inst = decode_bytes(inst_bytes)
    except DecodeError as e:
        raise UndecodableInstruction(f"cannot classify {bytes(inst_bytes).hex()}: {e}")
    return _EDGE_KINDS.get(inst.inst_class)


def tracer_available():
    return ptrace.available()


@dataclass
class _Step:
    """The instruction just stepped and what is known about it"""
    address: int
    loc: Optional[NormAddr]
    kind: Optional[EdgeKind] = None
    halting: bool = False
    undecoded: bool = False
    raw: bytes = b''


class Tracer:
    def __init__(self, spec, main_module_only=True, block_skip=True):
        self.spec = spec
        self.main_module_only = main_module_only
        self.block_skip = block_skip
        self.main_path = resolve_main(spec.program_path)
        self.modules = []
        self.insts = {}
        self.edges = set()
        self.leaders = set()
        self.signals = []
        self.skipped = 0
        self.outside = False
        self.blocks = {}
        self.kinds = {}
        self.pid = None
        self._mem = None
        self._timed_out = threading.Event()

    # process control

    def launch(self):
        stdin = open(self.spec.stdin_file, 'rb') if self.spec.stdin_file else subprocess.DEVNULL
        try:
            proc = subprocess.Popen(
                [self.spec.program_path, *self.spec.args],
                env=self.spec.environment(),
                stdin=stdin,
                stdout=subprocess.DEVNULL,
                preexec_fn=ptrace.traceme,
            )
        except (OSError, subprocess.SubprocessError) as e:
            raise LaunchFailure(f"cannot start {self.spec.program_path}: {e}")
        finally:
            if stdin is not subprocess.DEVNULL:
                stdin.close()
        self.pid = proc.pid
        # reaped with os.waitpid below
        proc.returncode = 0
        _, status = os.waitpid(self.pid, 0)
        if not os.WIFSTOPPED(status):
            raise LaunchFailure(f"{self.spec.program_path} did not stop at exec")
        ptrace.set_options(
            self.pid,
            ptrace.PTRACE_O_EXITKILL | ptrace.PTRACE_O_TRACECLONE
            | ptrace.PTRACE_O_TRACEFORK | ptrace.PTRACE_O_TRACEVFORK,
        )
        self._mem = open(f'/proc/{self.pid}/mem', 'rb', buffering=0)
        self.refresh_modules()
        logger.info(f"Tracing {self.main_path} (pid {self.pid}), {len(self.modules)} modules at start")

    def refresh_modules(self):
        known = {m.path for m in self.modules}
        for module in build_modules(read_maps(self.pid), self.main_path):
            if module.path not in known:
                self.modules.append(module.with_id(len(self.modules)))
                logger.debug(f"Module {module.path} at {module.runtime_base:#x}")

    def module_of(self, address):
        for module in self.modules:
            if module.contains_raw(address):
                return module
        return None

    def locate(self, address):
        module = self.module_of(address)
        if module is None:
            self.refresh_modules()
            module = self.module_of(address)
        if module is None:
            return None
        return NormAddr(module.module_id, address - module.runtime_base)

    def read(self, address, size):
        self._mem.seek(address)
        try:
            return self._mem.read(size)
        except OSError:
            room = 0x1000 - (address & 0xfff)
            self._mem.seek(address)
            return self._mem.read(min(size, room))

    def wait(self):
        _, status = os.waitpid(self.pid, 0)
        return status

    # recording

    def inspect(self, address, loc):
        """Read the instruction about to execute; nothing is recorded yet"""
        window = self.read(address, MAX_INST_LEN)
        known = self.insts.get(loc)
        if known is not None:
            if window[:known.length] != known.raw:
                raise SelfModifyingDetected(
                    f"bytes at {loc} changed from {known.raw.hex()} to {window[:known.length].hex()}"
                )
            kind, halting = self.kinds.get(loc, (None, False))
            return _Step(address, loc, kind, halting, raw=known.raw)
        try:
            inst = parse(window, 0)
        except DecodeError as e:
            logger.debug(f"Undecodable instruction at {loc}: {e}")
            return _Step(address, loc, undecoded=True, raw=window)
        kind = _EDGE_KINDS.get(inst.inst_class)
        halting = inst.inst_class is InstClass.HALTING
        self.kinds[loc] = (kind, halting)
        return _Step(address, loc, kind, halting, raw=inst.raw)

    def commit(self, step, rip):
        """Record a stepped instruction; rip is where execution went, None if unknown"""
        if step.loc is None:
            return False
        if step.loc in self.insts:
            return True
        if not step.undecoded:
            self.insts[step.loc] = InstRecord(step.loc, len(step.raw), step.raw)
            return True
        length = None if rip is None else rip - step.address
        if length is not None and 1 <= length <= min(MAX_INST_LEN, len(step.raw)):
            self.insts[step.loc] = InstRecord(step.loc, length, step.raw[:length])
            logger.debug(f"Inferred length {length} for undecodable instruction at {step.loc}")
            return True
        logger.warning(f"Dropped undecodable instruction at {step.loc}")
        return False

    def link(self, step, rip):
        """Edge and leader for a completed transfer; returns the destination loc"""
        dst = self.locate(rip)
        if dst is not None:
            self.leaders.add(dst)
            if step.loc is not None:
                self.edges.add(EdgeRecord(step.loc, dst, step.kind))
        return dst

    def reenter(self, loc):
        """Make loc a leader when it resumes execution after steps outside every module"""
        if not self.outside:
            return False
        self.outside = False
        self.leaders.add(loc)
        return True

    def signal_at(self, signo, address):
        loc = self.locate(address)
        if loc is not None:
            self.signals.append((int(signo), loc))

    # block skip

    def run_to(self, address):
        """Run at full speed until address; None when stopped there, else the wait status"""
        word = ptrace.peek_word(self.pid, address)
        ptrace.poke_word(self.pid, address, (word & ~0xff) | INT3)
        ptrace.cont(self.pid)
        status = self.wait()
        if os.WIFEXITED(status) or os.WIFSIGNALED(status):
            return status
        ptrace.poke_word(self.pid, address, word)
        regs = ptrace.get_regs(self.pid)
        if os.WSTOPSIG(status) == signal.SIGTRAP and regs.rip == address + 1:
            regs.rip = address
            ptrace.set_regs(self.pid, regs)
            return None
        return status

    # main loop

    def run(self):
        if not ptrace.host_supported():
            raise UnsupportedPlatform("tracing needs Linux x86-64")
        ptrace.libc()
        self.launch()
        watchdog = threading.Timer(self.spec.timeout_s, self._expire)
        watchdog.start()
        started = time.monotonic()
        try:
            exit_code = self._loop()
        finally:
            watchdog.cancel()
            if self._mem is not None:
                self._mem.close()
        partial = self._timed_out.is_set()
        if partial:
            logger.warning(f"Trace of {self.main_path} timed out; keeping the partial trace")
        logger.info(
            f"Traced {len(self.insts)} unique instructions in {time.monotonic() - started:.2f}s, "
            f"{self.skipped} steps outside every module"
        )
        trace = TraceSet.build(self.modules, self.insts.values(), self.edges, self.leaders, partial=partial)
        signals = tuple(self.signals)
        if self.main_module_only:
            trace = trace.filter_module(0)
            signals = tuple((signo, loc) for signo, loc in signals if loc.module_id == 0)
        return TraceOutcome(trace, exit_code, signals, self.skipped)

    def _expire(self):
        self._timed_out.set()
        try:
            os.kill(self.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass

    def _check_events(self, status):
        event = status >> 16
        if event in (ptrace.PTRACE_EVENT_CLONE, ptrace.PTRACE_EVENT_FORK, ptrace.PTRACE_EVENT_VFORK):
            ptrace.kill(self.pid)
            self.wait()
            raise MultiThreadedTarget(f"{self.main_path} started another thread or process")

    def _loop(self):
        pending = 0
        leader = None
        at_leader = False
        first = True
        while True:
            rip = ptrace.get_regs(self.pid).rip
            loc = self.locate(rip)
            if first:
                first = False
                if loc is not None:
                    self.leaders.add(loc)
                    leader, at_leader = loc, True

            if pending:
                # deliver the signal; the instruction at rip does not run on this step
                ptrace.single_step(self.pid, pending)
                pending = 0
                leader, at_leader = None, False
                status = self.wait()
                if os.WIFEXITED(status):
                    return os.WEXITSTATUS(status)
                if os.WIFSIGNALED(status):
                    return -os.WTERMSIG(status)
                self._check_events(status)
                if os.WSTOPSIG(status) != signal.SIGTRAP:
                    pending = os.WSTOPSIG(status)
                    self.signal_at(pending, ptrace.get_regs(self.pid).rip)
                continue

            if self.block_skip and at_leader and leader == loc and self.blocks.get(loc, rip) != rip:
                terminator = self.blocks[loc]
                status = self.run_to(terminator)
                at_leader = False
                if status is not None:
                    leader = None
                    if os.WIFEXITED(status):
                        return os.WEXITSTATUS(status)
                    if os.WIFSIGNALED(status):
                        return -os.WTERMSIG(status)
                    self._check_events(status)
                    pending = os.WSTOPSIG(status)
                    self.signal_at(pending, ptrace.get_regs(self.pid).rip)
                    continue
                rip = terminator
                loc = self.locate(rip)

            if loc is None:
                self.skipped += 1
                self.outside = True
                step = _Step(rip, None)
            else:
                if self.reenter(loc):
                    leader = loc
                step = self.inspect(rip, loc)
            at_leader = False

            ptrace.single_step(self.pid)
            status = self.wait()
            if os.WIFEXITED(status):
                self.commit(step, None)
                return os.WEXITSTATUS(status)
            if os.WIFSIGNALED(status):
                return -os.WTERMSIG(status)
            self._check_events(status)

            signo = os.WSTOPSIG(status)
            new_rip = ptrace.get_regs(self.pid).rip
            if signo != signal.SIGTRAP:
                # ud2 and friends trap before completing; they still count as executed
                if step.halting:
                    self.commit(step, None)
                self.signal_at(signo, new_rip)
                pending = signo
                leader = None
                continue
            if step.raw[:1] == bytes([INT3]) and new_rip == rip + 1:
                self.commit(step, new_rip)
                self.signal_at(signal.SIGTRAP, rip)
                pending = int(signal.SIGTRAP)
                leader = None
                continue

            if not self.commit(step, new_rip):
                leader = None
                continue
            if step.kind is not None:
                if leader is not None:
                    self.blocks.setdefault(leader, step.address)
                leader = self.link(step, new_rip)
                at_leader = leader is not None
            elif step.halting or step.undecoded:
                leader = None


def collect(spec, main_module_only=True, block_skip=True):
    return Tracer(spec, main_module_only, block_skip).run().trace


def collect_outcome(spec, main_module_only=True, block_skip=True):
    return Tracer(spec, main_module_only, block_skip).run()
