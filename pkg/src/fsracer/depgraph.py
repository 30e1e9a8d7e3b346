"""Dependency graph of a compiled Puppet catalog.

Nodes are resource references (``Type[title]``).  An edge ``(a, b, label)``
means ``a`` is applied before ``b``; a ``notify`` edge additionally makes
``a`` refresh ``b``.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from collections import Counter
from collections.abc import Iterable
from pathlib import Path

log = logging.getLogger(__name__)

BEFORE = "before"
NOTIFY = "notify"
LABELS = (BEFORE, NOTIFY)

# parameter -> (label, edge points from the referenced resource to the holder)
_RELATIONSHIP_PARAMS = {
    "require": (BEFORE, True),
    "subscribe": (NOTIFY, True),
    "before": (BEFORE, False),
    "notify": (NOTIFY, False),
}


class CatalogError(Exception):
    pass


class CycleError(CatalogError):
    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


_REF_RE = re.compile(r"^\s*([A-Za-z][\w:]*)\s*\[\s*(.*?)\s*\]\s*$", re.S)


def canonical_ref(ref: str) -> str:
    """``file["/etc/x"]`` -> ``File[/etc/x]``; other strings pass through."""
    m = _REF_RE.match(ref)
    if not m:
        return ref.strip()
    type_name = "::".join(seg[:1].upper() + seg[1:] for seg in m.group(1).split("::"))
    title = m.group(2)
    if len(title) >= 2 and title[0] == title[-1] and title[0] in "'\"":
        title = title[1:-1]
    return f"{type_name}[{title}]"


def resource_ref(type_name: str, title: str) -> str:
    return canonical_ref(f"{type_name}[{title}]")


class DependencyGraph:
    """Labeled DAG with memoized reachability queries.

    ``happens_before`` follows edges of any label, ``notifies`` only
    ``notify`` edges.  Reachable sets are computed once per source node.
    """

    def __init__(self, nodes: Iterable[str] = (), edges: Iterable[tuple[str, str, str]] = ()):
        self.nodes: set[str] = set(nodes)
        self._edges: dict[tuple[str, str], str] = {}
        self.stats: Counter = Counter()
        self._lock = threading.Lock()
        self._succ: dict[str, dict[str, None]] = {}
        self._notify_succ: dict[str, dict[str, None]] = {}
        self._reach: dict[str, frozenset] = {}
        self._notify_reach: dict[str, frozenset] = {}
        for src, dst, label in edges:
            self.add_edge(src, dst, label)

    @property
    def edges(self) -> set[tuple[str, str, str]]:
        return {(s, d, label) for (s, d), label in self._edges.items()}

    def label(self, src: str, dst: str) -> str | None:
        return self._edges.get((src, dst))

    def add_edge(self, src: str, dst: str, label: str) -> None:
        """Add an edge; a pair seen with both labels keeps ``notify``."""
        if label not in LABELS:
            raise ValueError(f"unknown edge label {label!r}")
        self.nodes.add(src)
        self.nodes.add(dst)
        if self._edges.get((src, dst)) == NOTIFY:
            return
        self._edges[(src, dst)] = label
        self._succ.setdefault(src, {})[dst] = None
        if label == NOTIFY:
            self._notify_succ.setdefault(src, {})[dst] = None
        self._reach.clear()
        self._notify_reach.clear()

    def successors(self, node: str, label: str | None = None) -> list[str]:
        table = self._notify_succ if label == NOTIFY else self._succ
        return list(table.get(node, ()))

    def find_cycle(self) -> list[str] | None:
        white, grey, black = 0, 1, 2
        color = dict.fromkeys(self.nodes, white)
        for start in sorted(self.nodes):
            if color[start] != white:
                continue
            stack = [(start, iter(sorted(self._succ.get(start, ()))))]
            color[start] = grey
            trail = [start]
            while stack:
                node, children = stack[-1]
                for child in children:
                    if color[child] == grey:
                        return trail[trail.index(child):] + [child]
                    if color[child] == white:
                        color[child] = grey
                        trail.append(child)
                        stack.append((child, iter(sorted(self._succ.get(child, ())))))
                        break
                else:
                    color[node] = black
                    trail.pop()
                    stack.pop()
        return None

    def _reachable(self, src: str, succ: dict, cache: dict) -> frozenset:
        hit = cache.get(src)
        if hit is not None:
            return hit
        seen: set[str] = set()
        stack = list(succ.get(src, ()))
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            done = cache.get(node)
            if done is not None:
                seen |= done
                continue
            stack.extend(succ.get(node, ()))
        result = frozenset(seen)
        with self._lock:
            cache[src] = result
        return result

    def _known(self, *nodes: str) -> bool:
        missing = [n for n in nodes if n not in self.nodes]
        if missing:
            for n in missing:
                log.debug("node %s is not in the dependency graph", n)
            self.stats["unknown-node"] += len(missing)
            return False
        return True

    def happens_before(self, a: str, b: str) -> bool:
        if not self._known(a, b) or a == b:
            return False
        return b in self._reachable(a, self._succ, self._reach)

    def notifies(self, a: str, b: str) -> bool:
        if not self._known(a, b) or a == b:
            return False
        return b in self._reachable(a, self._notify_succ, self._notify_reach)

    def to_dot(self, name: str = "catalog") -> str:
        def q(s: str) -> str:
            return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'

        lines = [f"digraph {q(name)} {{"]
        for node in sorted(self.nodes):
            lines.append(f"  {q(node)};")
        for (src, dst), label in sorted(self._edges.items()):
            lines.append(f"  {q(src)} -> {q(dst)} [label={label}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def happens_before(g: DependencyGraph, a: str, b: str) -> bool:
    return g.happens_before(a, b)


def notifies(g: DependencyGraph, a: str, b: str) -> bool:
    return g.notifies(a, b)


def _refs(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [canonical_ref(value)]
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_refs(v))
        return out
    return []


def load_catalog(doc: dict, containment: bool = True) -> DependencyGraph:
    """Build the dependency graph of a catalog document.

    Relationship metaparameters give the labeled edges.  With
    ``containment`` the catalog's ``edges`` (container -> contained) are
    added as ``before`` edges, and every relationship that names a
    container (a class, stage or defined-type instance) is also applied to
    everything the container holds, so ordering between classes reaches
    the resources inside them.
    """
    if "resources" not in doc and isinstance(doc.get("data"), dict):
        doc = doc["data"]
    if not isinstance(doc.get("resources"), list):
        raise CatalogError("catalog has no `resources` array")

    graph = DependencyGraph()
    for res in doc["resources"]:
        try:
            graph.nodes.add(resource_ref(res["type"], str(res["title"])))
        except (KeyError, TypeError):
            raise CatalogError(f"malformed resource entry: {res!r}") from None

    relations: list[tuple[str, str, str]] = []
    for res in doc["resources"]:
        holder = resource_ref(res["type"], str(res["title"]))
        params = res.get("parameters") or {}
        for param, (label, inbound) in _RELATIONSHIP_PARAMS.items():
            for ref in _refs(params.get(param)):
                src, dst = (ref, holder) if inbound else (holder, ref)
                relations.append((src, dst, label))

    contains: dict[str, list[str]] = {}
    if containment:
        for edge in doc.get("edges") or []:
            try:
                src, dst = canonical_ref(edge["source"]), canonical_ref(edge["target"])
            except (KeyError, TypeError, AttributeError):
                graph.stats["malformed-edge"] += 1
                continue
            if src not in graph.nodes or dst not in graph.nodes:
                log.debug("dropping containment edge %s -> %s: unknown endpoint", src, dst)
                graph.stats["dangling-edge"] += 1
                continue
            contains.setdefault(src, []).append(dst)

    def contents(node: str) -> list[str]:
        out, stack, seen = [node], list(contains.get(node, ())), {node}
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            out.append(n)
            stack.extend(contains.get(n, ()))
        return out

    for src, dst, label in relations:
        if src not in graph.nodes or dst not in graph.nodes:
            log.debug("dropping relationship %s -> %s: unknown endpoint", src, dst)
            graph.stats["dangling-edge"] += 1
            continue
        for s in contents(src):
            for d in contents(dst):
                if s != d:
                    graph.add_edge(s, d, label)

    for src, children in contains.items():
        for dst in children:
            if graph.label(src, dst) is None:
                graph.add_edge(src, dst, BEFORE)

    cycle = graph.find_cycle()
    if cycle:
        raise CycleError(cycle)
    return graph


def load_catalog_file(path: str | Path, containment: bool = True) -> DependencyGraph:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: not valid JSON: {exc}") from None
    return load_catalog(doc, containment=containment)
