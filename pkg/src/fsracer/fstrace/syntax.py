"""Constructs of the trace modeling language.

Every system call of interest is reduced to one of eleven constructs.
Paths are kept as strings; the interpreter normalizes them when it
turns them into absolute paths.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

AT_FDCWD = -100  # same value as Linux <fcntl.h>


class Effect(str, enum.Enum):
    CONSUMED = "consumed"
    PRODUCED = "produced"
    EXPUNGED = "expunged"

    def __str__(self) -> str:
        return self.value


class OpenFlag(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    TRUNC = "trunc"
    CREAT = "creat"

    def __str__(self) -> str:
        return self.value


class CloneFlag(str, enum.Enum):
    FD = "fd"
    CWD = "cwd"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class Chdir:
    path: str
    dirfd: int = AT_FDCWD


@dataclass(frozen=True, slots=True)
class Clone:
    flags: frozenset
    child: int


@dataclass(frozen=True, slots=True)
class Close:
    fd: int


@dataclass(frozen=True, slots=True)
class DupFd:
    old: int
    new: int


@dataclass(frozen=True, slots=True)
class HPath:
    dirfd: int
    path: str
    effect: Effect


@dataclass(frozen=True, slots=True)
class HPathSym:
    dirfd: int
    path: str
    effect: Effect


@dataclass(frozen=True, slots=True)
class Link:
    dirfd1: int
    path1: str
    dirfd2: int
    path2: str


@dataclass(frozen=True, slots=True)
class Open:
    dirfd: int
    path: str
    flags: frozenset
    fd: int


@dataclass(frozen=True, slots=True)
class Rename:
    dirfd1: int
    path1: str
    dirfd2: int
    path2: str


@dataclass(frozen=True, slots=True)
class Symlink:
    target: str
    dirfd: int
    path: str


@dataclass(frozen=True, slots=True)
class Nop:
    pass


NOP = Nop()

SysOp = Chdir | Clone | Close | DupFd | HPath | HPathSym | Link | Open | Rename | Symlink | Nop


def open_effect(flags) -> Effect:
    """Effect an ``open`` has on its path given its open flags."""
    if (OpenFlag.TRUNC in flags and OpenFlag.WRITE in flags) or OpenFlag.CREAT in flags:
        return Effect.PRODUCED
    return Effect.CONSUMED
