"""Synthetic Puppet runs: an strace file, its catalog and the faults it hides.

Every block works on a private directory (temp file, rename into place,
re-read), reads a few shared library files nobody writes, and touches
incidental paths under ignored prefixes.  None of that yields a fault.
Faults are planted only where asked:

* ``inject_mor=(a, b)``: block ``a`` writes a shared file that block ``b``
  reads, and the catalog orders the two in neither direction.
* ``inject_mn=(a, b)``: block ``b`` is a service that reads a file ``a``
  writes; the catalog orders ``a`` before ``b`` without a notify path.

Blocks are referred to by index.  Random catalog edges are added only when
they keep every planted fault intact, so the returned fault list is exactly
what the detector should report.  Output is a pure function of the
arguments.
"""
from __future__ import annotations

import json
import random
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from fsracer.strace_parser import encode_string

GEN_ROOT = "/srv/fsracer-gen"
LIB_FILES = ("/usr/lib/ruby/vendor_ruby/puppet.rb", "/etc/ld.so.cache", "/usr/lib/x86_64-linux-gnu/libc.so.6")
# written and read by different blocks, but under prefixes the detector ignores
NOISE_FILES = ("/run/lock/fsracer-gen.lock", "/proc/self/stat", "/var/lib/puppet/state/agent.lock")
TEMP_SLOTS = 4
ROOT_PID = 1000


class FaultSpecError(ValueError):
    pass


@dataclass
class GeneratedRun:
    trace_path: Path
    catalog_path: Path
    faults_path: Path
    faults: list[dict]
    blocks: list[str]


def _block_names(n: int, services: set[int], rng: random.Random) -> list[str]:
    names = []
    for i in range(n):
        kind = "Service" if i in services else rng.choice(("File", "File", "Exec", "Package"))
        title = {
            "File": f"{GEN_ROOT}/b{i}/managed",
            "Exec": f"exec-{i}",
            "Package": f"pkg-{i}",
            "Service": f"svc-{i}",
        }[kind]
        names.append(f"{kind}[{title}]")
    return names


def _reaches(succ: dict[int, dict[int, str]], a: int, b: int, notify_only: bool = False) -> bool:
    stack, seen = [a], {a}
    while stack:
        n = stack.pop()
        for m, label in succ[n].items():
            if notify_only and label != "notify":
                continue
            if m == b:
                return True
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def _plan_edges(n, mor, mn, rng):
    succ: dict[int, dict[int, str]] = {i: {} for i in range(n)}
    for a, b in mn:
        succ[a][b] = "before"
    for a, b in mn:
        if _reaches(succ, b, a):
            raise FaultSpecError(f"fault list forces a cycle between blocks {a} and {b}")
    for a, b in mor:
        if _reaches(succ, a, b) or _reaches(succ, b, a):
            raise FaultSpecError(f"blocks {a} and {b} must be unordered but the injected notifiers order them")

    def keeps_faults(a, b, label):
        succ[a][b] = label
        ok = not _reaches(succ, b, a)
        ok = ok and all(not _reaches(succ, x, y) and not _reaches(succ, y, x) for x, y in mor)
        ok = ok and all(not _reaches(succ, x, y, notify_only=True) for x, y in mn)
        del succ[a][b]
        return ok

    for _ in range(2 * n):
        a, b = rng.sample(range(n), 2) if n > 1 else (0, 0)
        if a == b or b in succ[a]:
            continue
        label = "notify" if rng.random() < 0.3 else "before"
        if keeps_faults(a, b, label):
            succ[a][b] = label
    return succ


def _topo_order(succ: dict[int, dict[int, str]]) -> list[int]:
    indeg = {i: 0 for i in succ}
    for edges in succ.values():
        for m in edges:
            indeg[m] += 1
    ready = sorted(i for i, d in indeg.items() if d == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in sorted(succ[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort()
    return order


def _catalog(names: list[str], succ) -> dict:
    resources = [
        {"type": "Stage", "title": "main", "parameters": {}},
        {"type": "Class", "title": "Gen", "parameters": {}},
    ]
    for i, name in enumerate(names):
        kind, title = name[:-1].split("[", 1)
        params: dict = {}
        for j, label in sorted(succ[i].items()):
            params.setdefault("notify" if label == "notify" else "before", []).append(names[j])
        resources.append({"type": kind, "title": title, "parameters": params})
    edges = [{"source": "Stage[main]", "target": "Class[Gen]"}]
    edges += [{"source": "Class[Gen]", "target": name} for name in names]
    return {"name": "fsracer-gen", "version": 1, "resources": resources, "edges": edges}


class _TraceWriter:
    def __init__(self, fh, rng: random.Random):
        self.fh = fh
        self.rng = rng
        self.written = 0
        self.next_pid = ROOT_PID + 1

    def emit(self, pid: int, text: str) -> None:
        line = f"{pid:<5} {text}\n"
        self.fh.write(line)
        self.written += len(line)

    def call(self, pid: int, name: str, args: str, ret) -> None:
        self.emit(pid, f"{name}({args}) = {ret}")

    def marker(self, block: str, what: str) -> None:
        msg = f"Info: /Stage[main]/Gen/{block}: {what}"
        self.call(ROOT_PID, "write", f"1, {encode_string(msg)}, {len(msg)}", len(msg))

    def read_file(self, pid: int, path: str, fd: int = 3) -> None:
        self.call(pid, "openat", f"AT_FDCWD, {encode_string(path)}, O_RDONLY|O_CLOEXEC", fd)
        self.call(pid, "fstat", f"{fd}, {{st_mode=S_IFREG|0644, st_size=2048, ...}}", 0)
        payload = "".join(self.rng.choice("abcdefghij \n") for _ in range(48))
        self.call(pid, "read", f"{fd}, {encode_string(payload)}..., 4096", 2048)
        self.call(pid, "close", str(fd), 0)

    def write_file(self, pid: int, path: str, fd: int = 4) -> None:
        q = encode_string(path)
        self.call(pid, "openat", f"AT_FDCWD, {q}, O_WRONLY|O_CREAT|O_TRUNC|O_CLOEXEC, 0644", fd)
        self.call(pid, "write", f"{fd}, \"generated content\\n\", 18", 18)
        self.call(pid, "close", str(fd), 0)


def _private_round(w: _TraceWriter, pid: int, idx: int, n_paths: int, step: int) -> None:
    """One unit of filler work inside a block's private directory."""
    base = f"{GEN_ROOT}/b{idx}"
    slot = step % TEMP_SLOTS
    target = f"{base}/f{step % n_paths}"
    temp = f"{base}/.tmp{slot}"
    w.call(pid, "stat", f"{encode_string(target)}, {{st_mode=S_IFREG|0644, st_size=18, ...}}", 0)
    w.write_file(pid, temp, fd=5)
    w.call(pid, "rename", f"{encode_string(temp)}, {encode_string(target)}", 0)
    w.read_file(pid, target, fd=6)
    w.call(pid, "mmap", "NULL, 8192, PROT_READ|PROT_WRITE, MAP_PRIVATE|MAP_ANONYMOUS, -1, 0", "0x7f3a2c000000")
    w.read_file(pid, LIB_FILES[step % len(LIB_FILES)], fd=7)


def _child_round(w: _TraceWriter, idx: int, n_paths: int, step: int) -> None:
    """Fork a helper that works relative to its cwd, then reap it."""
    child = w.next_pid
    w.next_pid += 1
    share = w.rng.random() < 0.3
    flags = "CLONE_VM|CLONE_FS|CLONE_FILES|CLONE_SIGHAND|CLONE_THREAD" if share else "CLONE_CHILD_CLEARTID|CLONE_CHILD_SETTID|SIGCHLD"
    w.call(ROOT_PID, "clone", f"child_stack=NULL, flags={flags}, child_tidptr=0x7f70159c39d0", child)
    base = f"{GEN_ROOT}/b{idx}"
    if not share:
        w.call(child, "chdir", encode_string(base), 0)
    rel = f"f{step % n_paths}" if not share else f"{base}/f{step % n_paths}"
    # the child's open is interrupted by the parent entering wait4
    w.emit(child, f"openat(AT_FDCWD, {encode_string(rel)}, O_RDONLY <unfinished ...>")
    w.emit(ROOT_PID, "wait4(-1,  <unfinished ...>")
    w.emit(child, "<... openat resumed>) = 3")
    w.call(child, "dup2", "3, 0", 0)
    w.call(child, "close", "3", 0)
    w.call(child, "read", '0, "generated content\\n", 4096', 18)
    w.call(child, "close", "0", 0)
    w.call(child, "newfstatat", f"AT_FDCWD, {encode_string(LIB_FILES[0])}, {{st_mode=S_IFREG|0644, st_size=2048, ...}}, 0", 0)
    w.call(child, "exit_group", "0", "?")
    w.emit(child, "+++ exited with 0 +++")
    w.emit(ROOT_PID, f"<... wait4 resumed>[{{WIFEXITED(s) && WEXITSTATUS(s) == 0}}], 0, NULL) = {child}")
    w.emit(ROOT_PID, f"--- SIGCHLD {{si_signo=SIGCHLD, si_code=CLD_EXITED, si_pid={child}, si_uid=0, si_status=0}} ---")


def generate(
    out_dir: str | Path,
    size: int = 1 << 20,
    blocks: int = 8,
    paths: int = 4,
    seed: int = 0,
    inject_mor: Sequence[tuple[int, int]] = (),
    inject_mn: Sequence[tuple[int, int]] = (),
) -> GeneratedRun:
    if size <= 0:
        raise FaultSpecError("size must be positive")
    if blocks < 1 or paths < 1:
        raise FaultSpecError("need at least one block and one path")
    mor = [tuple(p) for p in inject_mor]
    mn = [tuple(p) for p in inject_mn]
    for a, b in mor + mn:
        if not (0 <= a < blocks and 0 <= b < blocks):
            raise FaultSpecError(f"fault between nonexistent blocks {a},{b} (have {blocks})")
        if a == b:
            raise FaultSpecError(f"fault needs two distinct blocks, got {a},{a}")
    if len(set(mor + mn)) != len(mor) + len(mn):
        raise FaultSpecError("the same block pair is listed twice")

    rng = random.Random(seed)
    names = _block_names(blocks, {b for _, b in mn}, rng)
    succ = _plan_edges(blocks, mor, mn, rng)
    order = _topo_order(succ)

    # per block: (shared path, produce?) pairs
    shared: dict[int, list[tuple[str, bool]]] = {i: [] for i in range(blocks)}
    truth: dict[tuple[str, str, str], list[str]] = {}
    for n, (a, b) in enumerate(mor + mn):
        witnesses = [f"{GEN_ROOT}/shared/fault{n}-p{k}" for k in range(paths)]
        for p in witnesses:
            shared[a].append((p, True))
            shared[b].append((p, False))
        is_mor = n < len(mor)
        if is_mor:
            truth[("MOR", names[a], names[b])] = witnesses
        if names[b].startswith("Service["):
            truth[("MN", names[a], names[b])] = witnesses

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.strace"
    catalog_path = out / "catalog.json"
    faults_path = out / "faults.json"

    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        w = _TraceWriter(fh, rng)
        w.call(ROOT_PID, "execve", '"/opt/puppetlabs/bin/puppet", ["puppet", "apply", "site.pp"], 0x7ffc1d2e3f40 /* 20 vars */', 0)
        for lib in LIB_FILES:
            w.read_file(ROOT_PID, lib)
        per_block = max(0, size - w.written) // blocks
        for idx in order:
            start = w.written
            w.marker(names[idx], "Starting to evaluate the resource")
            w.call(ROOT_PID, "mkdir", f"{encode_string(f'{GEN_ROOT}/b{idx}')}, 0755", 0)
            for p, produce in shared[idx]:
                if produce:
                    w.write_file(ROOT_PID, p)
                else:
                    w.read_file(ROOT_PID, p)
            noise = NOISE_FILES[idx % len(NOISE_FILES)]
            if idx % 2:
                w.write_file(ROOT_PID, noise)
            else:
                w.read_file(ROOT_PID, noise)
            step = 0
            while True:
                _private_round(w, ROOT_PID, idx, paths, step)
                if step % 4 == 3:
                    _child_round(w, idx, paths, step)
                step += 1
                if w.written - start >= per_block - 200:
                    break
            w.marker(names[idx], f"Evaluated in {rng.randint(1, 999) / 100:.2f} seconds")
        w.call(ROOT_PID, "exit_group", "0", "?")
        w.emit(ROOT_PID, "+++ exited with 0 +++")

    catalog_path.write_text(json.dumps(_catalog(names, succ), indent=1, sort_keys=True) + "\n")
    faults = [
        {"kind": k, "producer": a, "consumer": b, "paths": sorted(ps)}
        for (k, a, b), ps in sorted(truth.items())
    ]
    faults_path.write_text(json.dumps(faults, indent=1) + "\n")
    return GeneratedRun(trace_path, catalog_path, faults_path, faults, names)
