"""Parse ``strace -f`` output into structured trace entries.

Expected invocation::

    strace -f -y -s 4096 -o trace.strace <puppet command>

``-f`` is mandatory: the file effects of a Puppet run are carried out by
child processes. ``-y`` decorations (``3</etc/passwd>``) are stripped.
Optional ``-t``/``-tt``/``-ttt`` timestamps after the pid and ``-T``
durations at the end of a line are tolerated.
"""
from __future__ import annotations

import codecs
import logging
import re
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from fsracer.fstrace.syntax import OpenFlag

log = logging.getLogger(__name__)


class TraceParseError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Sym(str):
    """A bare (unquoted) argument token such as ``O_RDONLY`` or ``{st_mode=...}``."""

    __slots__ = ()

    def __repr__(self) -> str:
        return f"Sym({str.__repr__(self)})"


class Truncated(str):
    """A string argument that strace cut short (rendered ``"abc"...``)."""

    __slots__ = ()

    def __repr__(self) -> str:
        return f"Truncated({str.__repr__(self)})"


@dataclass(frozen=True, slots=True)
class TraceEntry:
    pid: int
    name: str
    args: tuple = ()
    retval: int | None = 0
    errno: str | None = None
    raw_line: str = field(default="", compare=False, repr=False)

    @property
    def failed(self) -> bool:
        return self.errno is not None or self.retval is None or self.retval < 0


# Syscalls whose arguments the modeler needs; everything else keeps name and
# return value only.  ``write`` is special-cased (only fd 1/2 payloads matter).
def _default_full_args() -> frozenset:
    from fsracer.fstrace.model import SYSCALL_TABLE

    return frozenset(name for name, rule in SYSCALL_TABLE.items() if rule["construct"] != "nop")


_PREFIX_RE = re.compile(
    r"^(?:\[pid\s+)?(?P<pid>\d+)\]?\s+"
    r"(?:(?:\d{2}:\d{2}:\d{2}(?:\.\d+)?|\d+\.\d+)\s+)?"
)
_CALL_RE = re.compile(r"(?P<name>[A-Za-z_][A-Za-z0-9_]*)\((?P<rest>.*)$", re.S)
_RESUMED_RE = re.compile(r"<\.\.\.\s+(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s+resumed>\s?(?P<rest>.*)$", re.S)
_UNFINISHED = "<unfinished ...>"
_RET_RE = re.compile(
    r"^\s*(?P<ret>-?\d+|0x[0-9a-fA-F]+|\?)(?:<[^>]*>)*"
    r"(?:\s+(?P<errno>E[A-Z0-9]+))?"
    r"(?:\s+\(.*?\))?"
    r"(?:\s+<\d+\.\d+>)?\s*$"
)
_TOKEN_RE = re.compile(r'"(?:[^"\\]|\\.)*"|[\[\]{}()]|,|[^,"\[\]{}()]+', re.S)
_INT_RE = re.compile(r"^-?(?:0|[1-9]\d*)$")
_DECORATED_RE = re.compile(r"^(?P<base>-?\d+|AT_FDCWD)<.*>$", re.S)
_WRITE_STDIO_RE = re.compile(r"^\s*[12](?:<[^>]*>)?\s*,")
_OPEN_CLOSE = {"(": ")", "[": "]", "{": "}"}
# a complete ``pid name(args) = ret`` line in one match; anything else takes the slow path
_FAST_RE = re.compile(
    r"^(?P<pid>\d+)\s+(?P<name>[A-Za-z_][A-Za-z0-9_]*)\((?P<args>.*)\)\s*=\s*"
    r"(?P<ret>-?\d+|0x[0-9a-fA-F]+|\?)(?:<[^>]*>)*"
    r"(?:\s+(?P<errno>E[A-Z0-9]+))?(?:\s+\(.*?\))?\s*$",
    re.S,
)
# flat argument lists: quoted strings (maybe truncated) and bare tokens only
_FLAT_ARG_RE = re.compile(r'\s*("(?:[^"\\]|\\.)*"(?:\.\.\.)?|[^,"]*?)\s*(,|$)', re.S)
_NESTING = re.compile(r"[\[{(]")


def decode_string(body: str) -> str:
    """Undo strace's C-style escaping of a string argument body (no quotes)."""
    if "\\" not in body:
        return body
    raw = codecs.escape_decode(body.encode("utf-8", "surrogateescape"))[0]
    return raw.decode("utf-8", "surrogateescape")


def encode_string(text: str) -> str:
    out = []
    for byte in text.encode("utf-8", "surrogateescape"):
        ch = chr(byte)
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif 0x20 <= byte < 0x7F:
            out.append(ch)
        else:
            out.append(f"\\x{byte:02x}")
    return '"' + "".join(out) + '"'


def _convert(token: str):
    token = token.strip()
    if not token:
        return Sym("")
    if token[0] == '"':
        if token.endswith("..."):
            return Truncated(decode_string(token[1:-4]))
        return decode_string(token[1:-1])
    m = _DECORATED_RE.match(token)
    if m:
        token = m.group("base")
    if _INT_RE.match(token):
        return int(token)
    return Sym(token)


def split_args(text: str) -> tuple:
    """Split the argument list of a call at top-level commas.

    Nested structures (``[...]``, ``{...}``) stay as one raw :class:`Sym`.
    """
    if _NESTING.search(text) is None:
        flat = _split_flat(text)
        if flat is not None:
            return flat
    args = []
    depth = 0
    current: list[str] = []
    for m in _TOKEN_RE.finditer(text):
        tok = m.group()
        if tok in _OPEN_CLOSE:
            depth += 1
        elif tok in (")", "]", "}"):
            depth -= 1
        elif tok == "," and depth == 0:
            args.append(_convert("".join(current)))
            current = []
            continue
        current.append(tok)
    tail = "".join(current)
    if tail.strip() or args:
        args.append(_convert(tail))
    return tuple(args)


def _split_flat(text: str) -> tuple | None:
    if not text.strip():
        return ()
    args = []
    pos = 0
    end = len(text)
    match = _FLAT_ARG_RE.match
    while True:
        m = match(text, pos)
        if m is None:
            return None
        args.append(_convert(m.group(1)))
        if not m.group(2):
            return tuple(args) if m.end() == end else None
        pos = m.end()


def _split_call(rest: str) -> tuple[str, str] | None:
    """Split ``args) = ret`` into the argument text and the return text."""
    idx = rest.rfind("=")
    while idx > 0:
        j = idx - 1
        while j >= 0 and rest[j] == " ":
            j -= 1
        if j >= 0 and rest[j] == ")":
            return rest[:j], rest[idx + 1:]
        idx = rest.rfind("=", 0, idx)
    return None


def render(entry: TraceEntry) -> str:
    """Render an entry back into one strace line."""
    parts = []
    for arg in entry.args:
        if isinstance(arg, Truncated):
            parts.append(encode_string(arg) + "...")
        elif isinstance(arg, Sym):
            parts.append(str(arg))
        elif isinstance(arg, str):
            parts.append(encode_string(arg))
        else:
            parts.append(str(arg))
    ret = "?" if entry.retval is None else str(entry.retval)
    if entry.errno:
        ret += f" {entry.errno}"
    return f"{entry.pid} {entry.name}({', '.join(parts)}) = {ret}"


class StraceParser:
    """Streaming parser; ``stats`` counts entries, merges and skipped lines."""

    def __init__(self, full_args: Iterable[str] | None = None):
        self.full_args = frozenset(full_args) if full_args is not None else _default_full_args()
        self.stats: Counter = Counter()
        self._pending: dict[int, tuple[str, str]] = {}

    def _skip(self, reason: str) -> None:
        self.stats["skipped"] += 1
        self.stats["skipped:" + reason] += 1

    def _wants_args(self, name: str, argtext: str) -> bool:
        if name == "write":
            return _WRITE_STDIO_RE.match(argtext) is not None
        return name in self.full_args

    def _build(self, pid: int, name: str, rest: str, raw: str) -> TraceEntry | None:
        split = _split_call(rest)
        if split is None:
            return None
        argtext, rettext = split
        m = _RET_RE.match(rettext)
        if m is None:
            return None
        ret = m.group("ret")
        if ret == "?":
            retval = None
        elif ret.startswith("0x"):
            retval = int(ret, 16)
        else:
            retval = int(ret)
        args = split_args(argtext) if self._wants_args(name, argtext) else ()
        return TraceEntry(pid, name, args, retval, m.group("errno"), raw)

    def parse(self, lines: Iterable[str]) -> Iterator[TraceEntry]:
        seen_content = False
        fast = _FAST_RE.match
        wants = self._wants_args
        n_fast = 0
        try:
            for lineno, raw in enumerate(lines, 1):
                m = fast(raw)
                if m is not None:
                    seen_content = True
                    name = m.group("name")
                    argtext = m.group("args")
                    ret = m.group("ret")
                    if ret == "?":
                        retval = None
                    elif ret.startswith("0x"):
                        retval = int(ret, 16)
                    else:
                        retval = int(ret)
                    n_fast += 1
                    yield TraceEntry(
                        int(m.group("pid")),
                        name,
                        split_args(argtext) if wants(name, argtext) else (),
                        retval,
                        m.group("errno"),
                        raw.rstrip("\n"),
                    )
                    continue
                seen_content = yield from self._parse_slow(lineno, raw, seen_content)
        finally:
            self.stats["entries"] += n_fast
        for _ in self._pending:
            self._skip("orphan-unfinished")
        self._pending.clear()

    def _parse_slow(self, lineno: int, raw: str, seen_content: bool):
        """Handle one line the fast path rejected; returns the updated ``seen_content``."""
        line = raw.rstrip("\n")
        if not line.strip():
            self._skip("blank")
            return seen_content
        m = _PREFIX_RE.match(line)
        if m is None:
            if not seen_content:
                raise TraceParseError(
                    lineno, "no pid column; record the trace with `strace -f`"
                )
            self._skip("unparseable")
            return seen_content
        seen_content = True
        pid = int(m.group("pid"))
        body = line[m.end():]
        if body.startswith(("---", "+++")):
            self._skip("signal-or-exit")
            return seen_content
        if body.startswith("<..."):
            rm = _RESUMED_RE.match(body)
            pending = self._pending.get(pid)
            if rm is None or pending is None or pending[0] != rm.group("name"):
                self._skip("unmatched-resumed")
                return seen_content
            del self._pending[pid]
            name, head = pending
            entry = self._build(pid, name, head + rm.group("rest"), line)
            if entry is None:
                # both the fragment and the resumed line are lost
                self._skip("unparseable")
                self._skip("unparseable")
                return seen_content
            self.stats["merged"] += 1
            self.stats["entries"] += 1
            yield entry
            return seen_content
        cm = _CALL_RE.match(body)
        if cm is None:
            self._skip("unparseable")
            return seen_content
        name, rest = cm.group("name"), cm.group("rest")
        stripped = rest.rstrip()
        if stripped.endswith(_UNFINISHED):
            if pid in self._pending:
                self._skip("orphan-unfinished")
            head = stripped[: -len(_UNFINISHED)]
            self._pending[pid] = (name, head)
            return seen_content
        entry = self._build(pid, name, rest, line)
        if entry is None:
            self._skip("unparseable")
            return seen_content
        self.stats["entries"] += 1
        yield entry
        return seen_content


def parse_stream(lines: Iterable[str], stats: Counter | None = None) -> Iterator[TraceEntry]:
    parser = StraceParser()
    try:
        yield from parser.parse(lines)
    finally:
        if stats is not None:
            stats.update(parser.stats)


_ACCESS_MODES = {
    "O_RDONLY": frozenset({OpenFlag.READ}),
    "O_WRONLY": frozenset({OpenFlag.WRITE}),
    "O_RDWR": frozenset({OpenFlag.READ, OpenFlag.WRITE}),
}


def parse_open_flags(token, stats: Counter | None = None) -> frozenset:
    """Map an strace flag expression such as ``O_RDWR|O_CREAT`` to open flags."""
    parts = str(token).replace(" ", "").split("|")
    flags: set = set()
    mode = None
    for part in parts:
        if part in _ACCESS_MODES:
            mode = _ACCESS_MODES[part]
        elif part == "O_TRUNC":
            flags.add(OpenFlag.TRUNC)
        elif part == "O_CREAT":
            flags.add(OpenFlag.CREAT)
    if mode is None:
        log.debug("no access mode in open flags %r; assuming O_RDONLY", token)
        if stats is not None:
            stats["unknown-open-mode"] += 1
        mode = _ACCESS_MODES["O_RDONLY"]
    return frozenset(flags | mode)
