"""Map parsed trace entries onto trace constructs.

The syscall table lives in ``data/syscalls.json``; each rule names the
construct and the argument positions it reads.  Entries flagged
``"extension": true`` go beyond the handful of calls the model was
originally described with.  A config file can override or add rules.

Failed calls: a failing call that only consumes a path is still recorded
(reading a file that does not exist yet is exactly the symptom of a
missing ordering).  Failed calls never change the file-system state, and
failed produce/expunge calls are dropped.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from importlib import resources

from fsracer.fstrace.syntax import (
    AT_FDCWD,
    NOP,
    Chdir,
    Clone,
    CloneFlag,
    Close,
    DupFd,
    Effect,
    HPath,
    HPathSym,
    Link,
    Open,
    Rename,
    Symlink,
    open_effect,
)
from fsracer.strace_parser import Sym, TraceEntry, Truncated, parse_open_flags

CONSTRUCTS = {"open", "hpath", "hpathsym", "link", "symlink", "rename", "dupfd", "close", "chdir", "clone", "nop"}


def load_table() -> dict:
    text = resources.files("fsracer").joinpath("data/syscalls.json").read_text()
    return json.loads(text)


SYSCALL_TABLE = load_table()


def merge_table(overrides: dict) -> dict:
    table = dict(SYSCALL_TABLE)
    for name, rule in overrides.items():
        if rule.get("construct") not in CONSTRUCTS:
            raise ValueError(f"syscall {name!r}: unknown construct {rule.get('construct')!r}")
        table[name] = rule
    return table


class _Skip(Exception):
    pass


_CLONE_FILES_RE = re.compile(r"\bCLONE_FILES\b")
_CLONE_FS_RE = re.compile(r"\bCLONE_FS\b")
_OPENAT2_FLAGS_RE = re.compile(r"flags=([A-Z0-9_|]+)")


class Modeler:
    def __init__(self, table: dict | None = None):
        self.table = table if table is not None else SYSCALL_TABLE
        self.stats: Counter = Counter()

    # -- argument access -------------------------------------------------------

    def _arg(self, entry: TraceEntry, idx: int):
        try:
            return entry.args[idx]
        except IndexError:
            raise _Skip("missing-arg") from None

    def _path(self, entry: TraceEntry, rule: dict, key: str) -> str:
        idx = rule.get(key)
        if idx is None:
            return ""
        arg = self._arg(entry, idx)
        if isinstance(arg, Truncated):
            raise _Skip("truncated-path")
        if isinstance(arg, Sym) or not isinstance(arg, str):
            raise _Skip("non-string-path")
        if not arg:
            raise _Skip("empty-path")
        return arg

    def _dirfd(self, entry: TraceEntry, rule: dict, key: str) -> int:
        idx = rule.get(key)
        if idx is None:
            return AT_FDCWD
        arg = self._arg(entry, idx)
        if isinstance(arg, int):
            return arg
        if arg == "AT_FDCWD":
            return AT_FDCWD
        raise _Skip("bad-dirfd")

    def _fd(self, entry: TraceEntry, spec) -> int:
        if spec == "ret":
            return entry.retval
        arg = self._arg(entry, spec)
        if not isinstance(arg, int) or isinstance(arg, bool):
            raise _Skip("bad-fd")
        return arg

    # -- modeling ----------------------------------------------------------------

    def model(self, entry: TraceEntry):
        rule = self.table.get(entry.name)
        if rule is None:
            return NOP
        construct = rule["construct"]
        if construct == "nop":
            return NOP
        try:
            op = getattr(self, "_" + construct)(entry, rule)
        except _Skip as why:
            self.stats["skipped:" + str(why)] += 1
            return NOP
        if entry.failed:
            return self._failed(op)
        return op

    def _failed(self, op):
        if isinstance(op, Open) and open_effect(op.flags) is Effect.CONSUMED:
            self.stats["failed-consumed"] += 1
            return HPathSym(op.dirfd, op.path, Effect.CONSUMED)
        if isinstance(op, (HPath, HPathSym)) and op.effect is Effect.CONSUMED:
            self.stats["failed-consumed"] += 1
            return op
        self.stats["failed-dropped"] += 1
        return NOP

    def _open(self, entry, rule):
        spec = rule["flags"]
        if isinstance(spec, str):
            flags = parse_open_flags(spec)
        else:
            raw = self._arg(entry, spec)
            if entry.name == "openat2":
                m = _OPENAT2_FLAGS_RE.search(str(raw))
                raw = m.group(1) if m else ""
            flags = parse_open_flags(raw, self.stats)
        fd = entry.retval if entry.retval is not None else -1
        return Open(self._dirfd(entry, rule, "dirfd"), self._path(entry, rule, "path"), flags, fd)

    def _hpath(self, entry, rule):
        effect = Effect(rule["effect"])
        d = self._dirfd(entry, rule, "dirfd")
        p = self._path(entry, rule, "path")
        nofollow = rule.get("nofollow")
        if nofollow is not None and nofollow < len(entry.args):
            if "AT_SYMLINK_NOFOLLOW" in str(entry.args[nofollow]):
                return HPathSym(d, p, effect)
        return HPath(d, p, effect)

    def _hpathsym(self, entry, rule):
        return HPathSym(self._dirfd(entry, rule, "dirfd"), self._path(entry, rule, "path"), Effect(rule["effect"]))

    def _link(self, entry, rule):
        return Link(
            self._dirfd(entry, rule, "dirfd1"),
            self._path(entry, rule, "path1"),
            self._dirfd(entry, rule, "dirfd2"),
            self._path(entry, rule, "path2"),
        )

    def _rename(self, entry, rule):
        return Rename(
            self._dirfd(entry, rule, "dirfd1"),
            self._path(entry, rule, "path1"),
            self._dirfd(entry, rule, "dirfd2"),
            self._path(entry, rule, "path2"),
        )

    def _symlink(self, entry, rule):
        return Symlink(
            self._path(entry, rule, "target"),
            self._dirfd(entry, rule, "dirfd"),
            self._path(entry, rule, "path"),
        )

    def _dupfd(self, entry, rule):
        if "cmd" in rule:
            cmd = str(self._arg(entry, rule["cmd"]))
            if cmd not in rule["cmds"]:
                return NOP
        new = self._fd(entry, rule["newfd"])
        if new is None or new < 0:
            raise _Skip("bad-fd")
        return DupFd(self._fd(entry, rule["fd"]), new)

    def _close(self, entry, rule):
        return Close(self._fd(entry, rule["fd"]))

    def _chdir(self, entry, rule):
        if "dirfd" in rule:
            return Chdir("", self._dirfd(entry, rule, "dirfd"))
        return Chdir(self._path(entry, rule, "path"))

    def _clone(self, entry, rule):
        if entry.retval is None or entry.retval <= 0:
            raise _Skip("no-child")
        text = " ".join(str(a) for a in entry.args)
        flags = set()
        if _CLONE_FILES_RE.search(text):
            flags.add(CloneFlag.FD)
        if _CLONE_FS_RE.search(text):
            flags.add(CloneFlag.CWD)
        return Clone(frozenset(flags), entry.retval)


def model(entry: TraceEntry):
    """Model one entry with the default table."""
    return _DEFAULT.model(entry)


_DEFAULT = Modeler()
