"""Cross the effect map against the dependency graph to find faults.

Two kinds of fault are reported:

MOR   a block produces a path another block consumes and the graph orders
      the two blocks in neither direction.
MN    a block produces a path a service consumes and no notify-only path
      leads from the producer to the service.
"""
from __future__ import annotations

import os
import re
from collections.abc import Iterable
from dataclasses import dataclass, field

from fsracer.block_tagger import BOTTOM, BlockID
from fsracer.depgraph import DependencyGraph
from fsracer.fstrace.syntax import Effect

MOR = "MOR"
MN = "MN"

DEFAULT_IGNORE = (
    "/proc/",
    "/sys/",
    "/dev/",
    "/run/",
    "/opt/puppetlabs/",
    "/var/lib/puppet",
)

IGNORE_ENV = "FSRACER_IGNORE"

_TYPE_RE = re.compile(r"^([^\[]+)\[")


def block_name(block) -> str:
    return block.name if isinstance(block, BlockID) else str(block)


def resource_type(name: str) -> str | None:
    m = _TYPE_RE.match(name)
    return m.group(1) if m else None


def is_service(block) -> bool:
    return resource_type(block_name(block)) == "Service"


def env_ignore() -> list[str]:
    raw = os.environ.get(IGNORE_ENV, "")
    return [p for p in raw.split(os.pathsep) if p]


def ignore_list(extra: Iterable[str] = (), defaults: bool = True) -> tuple[str, ...]:
    out = list(DEFAULT_IGNORE) if defaults else []
    out.extend(extra)
    out.extend(env_ignore())
    return tuple(dict.fromkeys(out))


def is_ignored(path: str, ignore: Iterable[str]) -> bool:
    """A prefix ending in ``/`` matches strictly below it; otherwise the
    prefix matches itself and everything beneath it."""
    for prefix in ignore:
        if prefix.endswith("/"):
            if path.startswith(prefix):
                return True
        elif path == prefix or path.startswith(prefix + "/"):
            return True
    return False


@dataclass
class FaultReport:
    kind: str
    producer: str
    consumer: str
    paths: list[str] = field(default_factory=list)
    detail: str = ""

    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.producer, self.consumer)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "producer": self.producer,
            "consumer": self.consumer,
            "paths": list(self.paths),
            "detail": self.detail,
        }

    def render(self) -> str:
        if self.kind == MOR:
            head = f"[MOR] {self.producer} <-> {self.consumer}"
        else:
            head = f"[MN]  {self.producer} -> {self.consumer}"
        lines = [head, f"      {self.detail}"]
        lines.extend(f"      path: {p}" for p in self.paths)
        return "\n".join(lines)


def _split_effects(effects) -> tuple[set[str], set[str]]:
    produced: set[str] = set()
    consumed: set[str] = set()
    for effect, block in effects:
        if block == BOTTOM or block_name(block) == BOTTOM.name:
            continue
        name = block_name(block)
        if effect is Effect.CONSUMED:
            consumed.add(name)
        else:
            produced.add((effect, name))
    return produced, consumed


def candidate_pairs(rho: dict, ignore: Iterable[str] = (), expunge_as_produce: bool = True):
    """Yield ``(path, producer, consumer)`` for every pair worth checking."""
    ignore = tuple(ignore)
    for path in sorted(rho):
        if ignore and is_ignored(path, ignore):
            continue
        tagged, consumers = _split_effects(rho[path])
        if not tagged or not consumers:
            continue
        producers = sorted(
            {name for effect, name in tagged if effect is Effect.PRODUCED or expunge_as_produce}
        )
        for b1 in producers:
            for b2 in sorted(consumers):
                if b1 != b2:
                    yield path, b1, b2


def detect(
    rho: dict,
    g: DependencyGraph,
    ignore: Iterable[str] = (),
    expunge_as_produce: bool = True,
) -> list[FaultReport]:
    """Report MOR and MN faults; one report per (kind, producer, consumer)."""
    merged: dict[tuple[str, str, str], FaultReport] = {}
    ordered: dict[tuple[str, str], bool] = {}
    notified: dict[tuple[str, str], bool] = {}

    def add(kind: str, b1: str, b2: str, path: str) -> None:
        report = merged.get((kind, b1, b2))
        if report is None:
            merged[(kind, b1, b2)] = FaultReport(kind, b1, b2, [path])
        elif report.paths[-1] != path:
            report.paths.append(path)

    for path, b1, b2 in candidate_pairs(rho, ignore, expunge_as_produce):
        pair = (b1, b2)
        if pair not in ordered:
            ordered[pair] = g.happens_before(b1, b2) or g.happens_before(b2, b1)
        if not ordered[pair]:
            add(MOR, b1, b2, path)
        if is_service(b2):
            if pair not in notified:
                notified[pair] = g.notifies(b1, b2)
            if not notified[pair]:
                add(MN, b1, b2, path)

    reports = sorted(merged.values(), key=FaultReport.key)
    for r in reports:
        r.paths.sort()
        r.detail = _detail(r, g, merged)
    return reports


def _detail(r: FaultReport, g: DependencyGraph, merged: dict) -> str:
    if r.kind == MOR:
        text = f"{r.producer} and {r.consumer} touch the same files with no ordering between them."
        if (MN, r.producer, r.consumer) in merged:
            text += " The same pair also has a missing notifier (MN)."
    else:
        text = f"{r.consumer} consumes files {r.producer} produces but is not notified of changes."
        if (MOR, r.producer, r.consumer) in merged:
            text += " The same pair also has a missing ordering (MOR)."
    unknown = [b for b in (r.producer, r.consumer) if b not in g.nodes]
    if unknown:
        text += " unknown-node: " + ", ".join(unknown) + " not in catalog."
    return text


def detect_literal(rho: dict, g: DependencyGraph, expunge_as_produce: bool = True) -> list[tuple]:
    """Direct nested-loop reading of the algorithm, without merging.

    Returns ``(kind, producer, consumer, path)`` tuples; used as a test oracle.
    """
    out = []
    for path in rho:
        t = set()
        c = set()
        for effect, block in rho[path]:
            name = block_name(block)
            if name == BOTTOM.name:
                continue
            if effect is Effect.CONSUMED:
                c.add(name)
            elif effect is Effect.PRODUCED or expunge_as_produce:
                t.add(name)
        for b1 in t:
            for b2 in c:
                if b1 == b2:
                    continue
                if not g.happens_before(b1, b2) and not g.happens_before(b2, b1):
                    out.append((MOR, b1, b2, path))
                if is_service(b2) and not g.notifies(b1, b2):
                    out.append((MN, b1, b2, path))
    return out
