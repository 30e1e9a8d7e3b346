"""Interpreter for trace constructs over an inode-based file-system state.

The state has six parts:

    inodes    (directory inode, filename) -> inode
    fds       fd-table address -> {fd: inode}
    cwds      cwd address -> inode
    procs     pid -> (fd-table address, cwd address)
    symlinks  inode -> target path
    effects   path -> {(effect, block)}

Processes refer to fd tables and working directories through addresses so
that clone can either share or copy them.
"""
from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable

from fsracer.block_tagger import BlockID, TaggedEntry
from fsracer.fstrace import paths
from fsracer.fstrace.model import Modeler
from fsracer.fstrace.syntax import (
    AT_FDCWD,
    Chdir,
    Clone,
    CloneFlag,
    Close,
    DupFd,
    Effect,
    HPath,
    HPathSym,
    Link,
    Nop,
    Open,
    Rename,
    Symlink,
    open_effect,
)

log = logging.getLogger(__name__)

ROOT_INODE = 0

EffectMap = dict  # path -> set[(Effect, BlockID)]


class ResolutionError(Exception):
    pass


class AnalysisState:
    def __init__(self):
        self.inodes: dict[tuple[int, str], int] = {}
        self.fds: dict[int, dict[int, int]] = {}
        self.cwds: dict[int, int] = {}
        self.procs: dict[int, tuple[int, int]] = {}
        self.symlinks: dict[int, str] = {}
        self.effects: EffectMap = {}
        # inode -> ordered keys of ``inodes`` that point at it
        self.parents: dict[int, dict[tuple[int, str], None]] = {}
        self.stats: Counter = Counter()
        self._next_inode = 1
        self._next_addr = 1
        self._addr_refs: Counter = Counter()
        self._inode_cache: dict[str, int] = {"/": ROOT_INODE}
        self._path_cache: dict[int, str | None] = {}

    # -- fresh names ---------------------------------------------------------

    def fresh_inode(self) -> int:
        ino = self._next_inode
        self._next_inode += 1
        return ino

    def fresh_addr(self) -> int:
        addr = self._next_addr
        self._next_addr += 1
        return addr

    def add_process(self, pid: int, cwd: str = "/") -> None:
        """Register a process with its own fresh fd table and cwd."""
        afd, acwd = self.fresh_addr(), self.fresh_addr()
        self.fds[afd] = {}
        self.cwds[acwd] = self.inode_of(paths.normalize(cwd))
        self.set_process(pid, afd, acwd)

    def remove_process(self, pid: int) -> None:
        """Forget an exited process and any fd table or cwd nobody else shares."""
        proc = self.procs.pop(pid, None)
        if proc is None:
            return
        for addr, table in zip(proc, (self.fds, self.cwds)):
            self._addr_refs[addr] -= 1
            if self._addr_refs[addr] <= 0:
                del self._addr_refs[addr]
                table.pop(addr, None)

    def set_process(self, pid: int, afd: int, acwd: int) -> None:
        if pid in self.procs:
            self.remove_process(pid)
        self.procs[pid] = (afd, acwd)
        self._addr_refs[afd] += 1
        self._addr_refs[acwd] += 1

    # -- inode table -----------------------------------------------------------

    def _invalidate(self) -> None:
        self._inode_cache = {"/": ROOT_INODE}
        self._path_cache = {}

    def bind(self, key: tuple[int, str], ino: int) -> None:
        old = self.inodes.get(key)
        if old == ino:
            return
        if old is not None:
            self._drop_parent(old, key)
        self.inodes[key] = ino
        self.parents.setdefault(ino, {})[key] = None
        self._invalidate()

    def unbind(self, key: tuple[int, str]) -> None:
        old = self.inodes.pop(key, None)
        if old is not None:
            self._drop_parent(old, key)
            self._invalidate()

    def _drop_parent(self, ino: int, key: tuple[int, str]) -> None:
        keys = self.parents[ino]
        del keys[key]
        if not keys:
            del self.parents[ino]

    def inode_of(self, path: str) -> int:
        """Inode of an absolute, normalized path; unseen names get fresh inodes."""
        ino = self._inode_cache.get(path)
        if ino is not None:
            return ino
        cur = ROOT_INODE
        inodes = self.inodes
        for comp in paths.components(path):
            key = (cur, comp)
            nxt = inodes.get(key)
            if nxt is None:
                nxt = self.fresh_inode()
                inodes[key] = nxt
                self.parents[nxt] = {key: None}
            cur = nxt
        self._inode_cache[path] = cur
        return cur

    def path_of(self, ino: int) -> str | None:
        """First path (by insertion order) that still reaches ``ino`` from the root."""
        if ino == ROOT_INODE:
            return "/"
        if ino in self._path_cache:
            return self._path_cache[ino]
        result = self._walk_up(ino, set())
        self._path_cache[ino] = result
        return result

    def _walk_up(self, ino: int, visiting: set) -> str | None:
        if ino == ROOT_INODE:
            return "/"
        if ino in visiting:
            return None
        visiting.add(ino)
        for parent, name in self.parents.get(ino, ()):
            base = self._path_cache.get(parent) if parent in self._path_cache else self._walk_up(parent, visiting)
            if base is not None:
                visiting.discard(ino)
                return base + name if base == "/" else base + "/" + name
        visiting.discard(ino)
        return None

    def key_of(self, path: str) -> tuple[int, str]:
        return (self.inode_of(paths.dirname(path)), paths.basename(path))

    # -- path resolution -----------------------------------------------------

    def resolve_abs(self, dirfd: int, path: str, pid: int) -> str:
        """Absolute path of ``path`` relative to ``dirfd`` for process ``pid``."""
        if path.startswith("/"):
            return paths.normalize(path)
        proc = self.procs.get(pid)
        if proc is None:
            raise ResolutionError(f"pid {pid} is unknown")
        if dirfd == AT_FDCWD:
            base = self.path_of(self.cwds[proc[1]])
            if base is None:
                raise ResolutionError("working directory has no path")
        else:
            ino = self.fds[proc[0]].get(dirfd)
            if ino is None:
                raise ResolutionError(f"fd {dirfd} is not open in pid {pid}")
            base = self.path_of(ino)
            if base is None:
                raise ResolutionError(f"fd {dirfd} refers to an unlinked file")
        return paths.join(base, path)

    # -- effects ---------------------------------------------------------------

    def record(self, path: str, effect: Effect, block: BlockID) -> None:
        entry = self.effects.get(path)
        if entry is None:
            self.effects[path] = {(effect, block)}
        else:
            entry.add((effect, block))

    def strip_block(self, path: str, block: BlockID) -> set:
        return {e for e in self.effects.get(path, ()) if e[1] != block}


def resolve_abs(dirfd: int, path: str, state: AnalysisState, pid: int) -> str:
    return state.resolve_abs(dirfd, path, pid)


# -- transition rules ----------------------------------------------------------


def _chdir(st: AnalysisState, b: BlockID, pid: int, op: Chdir) -> None:
    target = st.resolve_abs(op.dirfd, op.path, pid)
    st.cwds[st.procs[pid][1]] = st.inode_of(target)


def _clone(st: AnalysisState, b: BlockID, pid: int, op: Clone) -> None:
    afd, acwd = st.procs[pid]
    if CloneFlag.FD not in op.flags:
        new_fd = st.fresh_addr()
        st.fds[new_fd] = dict(st.fds[afd])
        afd = new_fd
    if CloneFlag.CWD not in op.flags:
        new_cwd = st.fresh_addr()
        st.cwds[new_cwd] = st.cwds[acwd]
        acwd = new_cwd
    st.set_process(op.child, afd, acwd)


def _close(st: AnalysisState, b: BlockID, pid: int, op: Close) -> None:
    table = st.fds[st.procs[pid][0]]
    if table.pop(op.fd, None) is None:
        st.stats["close-unknown-fd"] += 1


def _dupfd(st: AnalysisState, b: BlockID, pid: int, op: DupFd) -> None:
    table = st.fds[st.procs[pid][0]]
    ino = table.get(op.old)
    if ino is None:
        st.stats["dup-unknown-fd"] += 1
        return
    table[op.new] = ino


def _open(st: AnalysisState, b: BlockID, pid: int, op: Open) -> None:
    target = st.resolve_abs(op.dirfd, op.path, pid)
    ino = st.inode_of(target)
    if op.fd >= 0:
        st.fds[st.procs[pid][0]][op.fd] = ino
    st.record(target, open_effect(op.flags), b)


def _expunge(st: AnalysisState, b: BlockID, target: str) -> None:
    if target == "/":
        st.stats["expunge-root"] += 1
        return
    kept = st.strip_block(target, b)
    kept.add((Effect.EXPUNGED, b))
    st.effects[target] = kept
    st.unbind(st.key_of(target))


def _hpath(st: AnalysisState, b: BlockID, pid: int, op: HPath) -> None:
    target = st.resolve_abs(op.dirfd, op.path, pid)
    if op.effect is Effect.EXPUNGED:
        _expunge(st, b, target)
        return
    link_target = st.symlinks.get(st.inode_of(target))
    st.record(link_target if link_target is not None else target, op.effect, b)


def _hpathsym(st: AnalysisState, b: BlockID, pid: int, op: HPathSym) -> None:
    target = st.resolve_abs(op.dirfd, op.path, pid)
    if op.effect is Effect.EXPUNGED:
        _expunge(st, b, target)
        return
    st.record(target, op.effect, b)


def _link(st: AnalysisState, b: BlockID, pid: int, op: Link) -> None:
    src = st.resolve_abs(op.dirfd1, op.path1, pid)
    dst = st.resolve_abs(op.dirfd2, op.path2, pid)
    if paths.overlaps(src, dst):
        st.stats["link-overlap"] += 1
        return
    ino = st.inode_of(src)
    st.bind(st.key_of(dst), ino)
    st.record(dst, Effect.PRODUCED, b)


def _symlink(st: AnalysisState, b: BlockID, pid: int, op: Symlink) -> None:
    dst = st.resolve_abs(op.dirfd, op.path, pid)
    if dst == "/":
        st.stats["symlink-root"] += 1
        return
    key = st.key_of(dst)
    ino = st.fresh_inode()
    st.bind(key, ino)
    st.symlinks[ino] = paths.join(paths.dirname(dst), op.target)
    st.record(dst, Effect.PRODUCED, b)


def _rename(st: AnalysisState, b: BlockID, pid: int, op: Rename) -> None:
    src = st.resolve_abs(op.dirfd1, op.path1, pid)
    dst = st.resolve_abs(op.dirfd2, op.path2, pid)
    if paths.overlaps(src, dst):
        st.stats["rename-overlap"] += 1
        return
    ino = st.inode_of(src)
    src_key = st.key_of(src)
    dst_key = st.key_of(dst)
    st.bind(dst_key, ino)
    st.unbind(src_key)
    kept = st.strip_block(src, b)
    kept.add((Effect.EXPUNGED, b))
    st.effects[src] = kept
    st.record(dst, Effect.PRODUCED, b)


_RULES = {
    Chdir: _chdir,
    Clone: _clone,
    Close: _close,
    DupFd: _dupfd,
    Open: _open,
    HPath: _hpath,
    HPathSym: _hpathsym,
    Link: _link,
    Symlink: _symlink,
    Rename: _rename,
}


def step(state: AnalysisState, block: BlockID, pid: int, op) -> AnalysisState:
    """Apply one construct to ``state`` in place and return it.

    Unresolvable paths, closed fds or unknown processes leave the state as
    it was and bump a counter in ``state.stats``.
    """
    rule = _RULES.get(type(op))
    if rule is None:
        return state
    if pid not in state.procs:
        state.stats["unknown-pid"] += 1
        return state
    try:
        rule(state, block, pid, op)
    except ResolutionError as exc:
        log.debug("pid %d: %s: %s", pid, type(op).__name__, exc)
        state.stats["unresolved"] += 1
    return state


EXIT_CALLS = frozenset({"exit", "exit_group"})
# process exit; not a trace construct, only lets the analyzer free the process
EXIT = object()


class Analyzer:
    """Folds tagged entries into an :class:`AnalysisState`.

    The first pid seen becomes the root process.  Entries of other pids
    that show up before the clone creating them (strace prints the child
    before the parent's clone returns) are held back and replayed right
    after that clone; pids never created by a clone are bootstrapped with
    their own tables at the end, or once ``max_pending`` ops pile up.
    """

    def __init__(self, cwd: str = "/", modeler: Modeler | None = None, max_pending: int = 4096):
        self.state = AnalysisState()
        self.cwd = cwd
        self.modeler = modeler or Modeler()
        self.max_pending = max_pending
        self.root_pid: int | None = None
        self._pending: dict[int, list] = {}

    @property
    def stats(self) -> Counter:
        return self.state.stats + self.modeler.stats

    def feed(self, block: BlockID, entry) -> None:
        op = self.modeler.model(entry)
        if type(op) is Nop:
            if entry.name in EXIT_CALLS:
                self.feed_op(block, entry.pid, EXIT)
            return
        self.feed_op(block, entry.pid, op)

    def feed_op(self, block: BlockID, pid: int, op) -> None:
        st = self.state
        if pid not in st.procs:
            if self.root_pid is None:
                self.root_pid = pid
                st.add_process(pid, self.cwd)
            else:
                queue = self._pending.setdefault(pid, [])
                queue.append((block, op))
                if len(queue) >= self.max_pending:
                    self._adopt(pid)
                return
        if op is EXIT:
            st.remove_process(pid)
            return
        step(st, block, pid, op)
        if type(op) is Clone and op.child in self._pending:
            self._flush(op.child)

    def _flush(self, pid: int) -> None:
        for block, op in self._pending.pop(pid, ()):
            self.feed_op(block, pid, op)

    def _adopt(self, pid: int) -> None:
        self.state.stats["unbound-pid"] += 1
        self.state.add_process(pid, self.cwd)
        self._flush(pid)

    def finish(self) -> EffectMap:
        while self._pending:
            self._adopt(next(iter(self._pending)))
        return self.state.effects


def analyze(tagged: Iterable[TaggedEntry], cwd: str = "/", modeler: Modeler | None = None) -> EffectMap:
    analyzer = Analyzer(cwd=cwd, modeler=modeler)
    for block, entry in tagged:
        analyzer.feed(block, entry)
    return analyzer.finish()
