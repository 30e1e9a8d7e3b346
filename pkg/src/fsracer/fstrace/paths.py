"""Textual path helpers: join, dir, base and canonical form."""
from __future__ import annotations


def normalize(path: str) -> str:
    """Drop ``.`` and empty segments and fold ``..`` textually."""
    absolute = path.startswith("/")
    parts: list[str] = []
    for comp in path.split("/"):
        if comp == "" or comp == ".":
            continue
        if comp == "..":
            if parts and parts[-1] != "..":
                parts.pop()
            elif not absolute:
                parts.append("..")
            continue
        parts.append(comp)
    if absolute:
        return "/" + "/".join(parts)
    return "/".join(parts) or "."


def is_absolute(path: str) -> bool:
    return path.startswith("/")


def join(base: str, path: str) -> str:
    if path.startswith("/"):
        return normalize(path)
    if not path:
        return normalize(base)
    return normalize(base + "/" + path)


def dirname(path: str) -> str:
    head = path.rsplit("/", 1)[0]
    return head or "/"


def basename(path: str) -> str:
    return path.rsplit("/", 1)[-1]


def components(path: str) -> list[str]:
    return [c for c in path.split("/") if c]


def overlaps(a: str, b: str) -> bool:
    """True if one path equals or lies beneath the other."""
    if a == b:
        return True
    if a == "/" or b == "/":
        return True
    return a.startswith(b + "/") or b.startswith(a + "/")
