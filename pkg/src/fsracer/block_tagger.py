"""Split a trace into execution blocks, one per Puppet resource.

Puppet logs ``Info: /Stage[main]/Ntp/File[/etc/ntp.conf]: Starting to
evaluate the resource`` before applying a resource and ``...: Evaluated in
0.06 seconds`` afterwards.  Those writes to stdout/stderr delimit blocks;
every entry between them, from any process, belongs to the block.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from collections.abc import Iterable, Iterator
from typing import TYPE_CHECKING, NamedTuple, Protocol

if TYPE_CHECKING:
    from fsracer.strace_parser import TraceEntry

log = logging.getLogger(__name__)


class BlockID(NamedTuple):
    name: str
    ordinal: int

    def __str__(self) -> str:
        return self.name


BOTTOM = BlockID("⊥", 0)


class TaggedEntry(NamedTuple):
    block: BlockID
    entry: TraceEntry


class Tagger(Protocol):
    def next(self, entry: TraceEntry) -> BlockID: ...


class NullTagger:
    """Tags everything as out-of-block, for plain trace modeling."""

    def __init__(self):
        self.stats: Counter = Counter()

    def next(self, entry: TraceEntry) -> BlockID:
        return BOTTOM

    def finish(self) -> None:
        pass


_MARKER_RE = re.compile(
    r"(?:(?:Info|Debug|Notice|Warning): |^)(?P<res>.+?): "
    r"(?P<kind>Starting to evaluate the resource|Evaluated in [0-9.]+ seconds)",
    re.M,
)
_TYPE_REF_RE = re.compile(r"(?:^|/)([A-Z][A-Za-z0-9_]*(?:::[A-Z][A-Za-z0-9_]*)*)\[")
_MAX_BUFFER = 8192


def resource_name(resource_path: str) -> str:
    """Trailing ``Type[title]`` of a resource path.

    Titles may contain ``/`` and brackets, so the leftmost ``Type[`` whose
    bracket closes exactly at the end of the string wins.
    """
    for m in _TYPE_REF_RE.finditer(resource_path):
        start = m.start(1)
        depth = 0
        for i in range(m.end() - 1, len(resource_path)):
            c = resource_path[i]
            if c == "[":
                depth += 1
            elif c == "]":
                depth -= 1
                if depth == 0:
                    if i == len(resource_path) - 1:
                        return resource_path[start:]
                    break
    return resource_path


class PuppetTagger:
    """Assigns each entry to the Puppet resource being evaluated.

    Markers are recognised on writes to fd 1 or 2 by the root process (the
    first pid seen).  Payloads are buffered per fd so a message split over
    several writes is still matched.
    """

    def __init__(self):
        self.stats: Counter = Counter()
        self.root_pid: int | None = None
        self.current: BlockID | None = None
        self._ordinal = 0
        self._buffers = {1: "", 2: ""}

    def _open(self, name: str) -> None:
        if self.current is not None:
            log.debug("block %s still open when %s starts; closing it", self.current.name, name)
            self.stats["force-closed"] += 1
        self._ordinal += 1
        self.current = BlockID(name, self._ordinal)
        self.stats["blocks"] += 1

    def _close(self, name: str) -> None:
        if self.current is None:
            self.stats["end-without-begin"] += 1
            return
        if self.current.name != name:
            self.stats["end-name-mismatch"] += 1
        self.current = None

    def _scan(self, fd: int, payload: str) -> bool:
        buf = self._buffers[fd] + payload
        found = False
        consumed = 0
        for m in _MARKER_RE.finditer(buf):
            found = True
            consumed = m.end()
            name = resource_name(m.group("res").strip())
            if m.group("kind").startswith("Starting"):
                self._open(name)
            else:
                self._close(name)
        rest = buf[consumed:]
        nl = rest.rfind("\n")
        if nl >= 0:
            rest = rest[nl + 1:]
        self._buffers[fd] = rest[-_MAX_BUFFER:]
        return found

    def next(self, entry: TraceEntry) -> BlockID:
        if self.root_pid is None:
            self.root_pid = entry.pid
        if (
            entry.name == "write"
            and entry.pid == self.root_pid
            and len(entry.args) >= 2
            and entry.args[0] in (1, 2)
            and isinstance(entry.args[1], str)
        ):
            if self._scan(entry.args[0], entry.args[1]):
                # the marker write itself stays outside every block
                return BOTTOM
        return self.current or BOTTOM

    def finish(self) -> None:
        if self.current is not None:
            self.stats["auto-closed"] += 1
            self.current = None


def tag(entries: Iterable[TraceEntry], tagger: Tagger | None = None) -> Iterator[TaggedEntry]:
    tagger = tagger if tagger is not None else PuppetTagger()
    for entry in entries:
        yield TaggedEntry(tagger.next(entry), entry)
    finish = getattr(tagger, "finish", None)
    if finish is not None:
        finish()
