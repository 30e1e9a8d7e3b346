"""Command-line entry point: ``fsracer analyze|graph|gen|run``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import subprocess
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from fsracer import __version__
from fsracer.block_tagger import BOTTOM, NullTagger, PuppetTagger, tag
from fsracer.depgraph import CatalogError, load_catalog_file
from fsracer.detector import detect, ignore_list
from fsracer.fstrace.interpreter import Analyzer
from fsracer.fstrace.model import Modeler, merge_table
from fsracer.generator import FaultSpecError, generate
from fsracer.strace_parser import StraceParser, TraceParseError

log = logging.getLogger("fsracer")

EXIT_CLEAN, EXIT_FAULTS, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    trace_path: str
    catalog_path: str
    ignore_list: list[str] = field(default_factory=list)
    tagger: str = "puppet"
    format: str = "text"
    dump_effects: str | None = None
    cwd: str = "/"
    expunge_as_produce: bool = True
    containment_edges: bool = True
    default_ignore: bool = True
    syscalls: dict = field(default_factory=dict)

    def validate(self) -> None:
        for prefix in self.ignore_list:
            if not prefix.startswith("/"):
                raise UsageError(f"ignore prefix {prefix!r} is not absolute")
        if not self.cwd.startswith("/"):
            raise UsageError(f"--cwd {self.cwd!r} is not absolute")
        if self.trace_path != "-" and not os.access(self.trace_path, os.R_OK):
            raise UsageError(f"cannot read trace {self.trace_path}")
        if not os.access(self.catalog_path, os.R_OK):
            raise UsageError(f"cannot read catalog {self.catalog_path}")


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig(
        trace_path=args.trace,
        catalog_path=args.catalog,
        ignore_list=list(args.ignore or ()),
        tagger=args.tagger,
        format=args.format,
        dump_effects=args.dump_effects,
        cwd=args.cwd,
        expunge_as_produce=args.expunge_as_produce,
        containment_edges=args.containment_edges,
    )
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                extra = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load config {args.config}: {exc}") from None
        cfg.ignore_list = list(extra.get("ignore", ())) + cfg.ignore_list
        cfg.default_ignore = bool(extra.get("default_ignore", True))
        cfg.syscalls = dict(extra.get("syscalls", {}))
    return cfg


def _effects_json(rho: dict) -> dict:
    return {
        path: sorted([effect.value, str(block)] for effect, block in rho[path])
        for path in sorted(rho)
    }


def cmd_analyze(cfg: RunConfig, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    cfg.validate()
    ignore = ignore_list(cfg.ignore_list, defaults=cfg.default_ignore)
    try:
        table = merge_table(cfg.syscalls) if cfg.syscalls else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    t_start = time.monotonic()
    with ThreadPoolExecutor(max_workers=1) as pool:
        graph_future = pool.submit(_timed, load_catalog_file, cfg.catalog_path, cfg.containment_edges)

        parser = StraceParser()
        tagger = PuppetTagger() if cfg.tagger == "puppet" else NullTagger()
        analyzer = Analyzer(cwd=cfg.cwd, modeler=Modeler(table))
        t0 = time.monotonic()
        if cfg.trace_path == "-":
            fh = open(sys.stdin.fileno(), encoding="utf-8", errors="surrogateescape", closefd=False)
        else:
            fh = open(cfg.trace_path, encoding="utf-8", errors="surrogateescape", buffering=1 << 20)
        trace_bytes = 0
        blocks: set = set()
        try:
            feed = analyzer.feed
            for block, entry in tag(parser.parse(fh), tagger):
                feed(block, entry)
                if block is not BOTTOM:
                    blocks.add(block)
            rho = analyzer.finish()
            trace_bytes = fh.tell() if cfg.trace_path != "-" else 0
        finally:
            if cfg.trace_path != "-":
                fh.close()
        t_trace = time.monotonic() - t0

        graph, t_graph = graph_future.result()

    t0 = time.monotonic()
    reports = detect(rho, graph, ignore=ignore, expunge_as_produce=cfg.expunge_as_produce)
    t_detect = time.monotonic() - t0

    stats = Counter()
    stats.update(parser.stats)
    stats.update(getattr(tagger, "stats", {}))
    stats.update(analyzer.stats)
    stats.update(graph.stats)
    entries = parser.stats["entries"]

    if cfg.dump_effects:
        with open(cfg.dump_effects, "w", encoding="utf-8") as fh:
            json.dump(_effects_json(rho), fh, indent=1)
            fh.write("\n")

    metrics = {
        "trace_bytes": trace_bytes,
        "entries": entries,
        "blocks": len(blocks),
        "paths": len(rho),
        "trace_seconds": round(t_trace, 6),
        "graph_seconds": round(t_graph, 6),
        "detect_seconds": round(t_detect, 6),
        "total_seconds": round(time.monotonic() - t_start, 6),
    }
    if cfg.format == "json":
        doc = {
            "version": __version__,
            "faults": [r.to_json() for r in reports],
            "stats": dict(sorted(stats.items())),
            "metrics": metrics,
        }
        json.dump(doc, out, indent=1)
        out.write("\n")
    else:
        for r in reports:
            out.write(r.render() + "\n\n")
        kinds = Counter(r.kind for r in reports)
        out.write(f"{len(reports)} fault(s): {kinds['MOR']} MOR, {kinds['MN']} MN\n")

    mb = trace_bytes / 1e6
    err.write(
        f"fsracer: {mb:.1f} MB, {entries} entries, {len(blocks)} blocks, {len(rho)} paths; "
        f"trace {t_trace:.2f}s, graph {t_graph:.2f}s, detect {t_detect:.2f}s\n"
    )
    skipped = stats["skipped"] - stats["skipped:blank"] - stats["skipped:signal-or-exit"]
    if skipped:
        err.write(f"fsracer: warning: {skipped} trace line(s) could not be parsed\n")
    if not blocks:
        if entries == 0:
            err.write("fsracer: warning: empty trace, zero blocks\n")
            return EXIT_CLEAN
        if cfg.tagger == "puppet":
            err.write(
                "fsracer: error: no resource blocks found; run Puppet with --evaltrace "
                "(or --debug) so resource evaluation is logged to stdout\n"
            )
            return EXIT_ERROR
    return EXIT_FAULTS if reports else EXIT_CLEAN


def _timed(fn, *args):
    t0 = time.monotonic()
    result = fn(*args)
    return result, time.monotonic() - t0


def cmd_graph(catalog: str, containment: bool = True, out=None) -> int:
    out = out or sys.stdout
    if not os.access(catalog, os.R_OK):
        raise UsageError(f"cannot read catalog {catalog}")
    out.write(load_catalog_file(catalog, containment).to_dot())
    return EXIT_CLEAN


_SIZE_RE = re.compile(r"^(\d+(?:\.\d+)?)([KMG]?)B?$", re.I)


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    scale = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}[m.group(2).upper()]
    return int(float(m.group(1)) * scale)


def parse_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two block indices A,B, got {text!r}") from None
    return a, b


def cmd_gen(args, out=None) -> int:
    out = out or sys.stdout
    run = generate(
        args.out,
        size=args.size,
        blocks=args.blocks,
        paths=args.paths,
        seed=args.seed,
        inject_mor=args.inject_mor or (),
        inject_mn=args.inject_mn or (),
    )
    out.write(f"trace   {run.trace_path}\ncatalog {run.catalog_path}\nfaults  {run.faults_path} ({len(run.faults)})\n")
    return EXIT_CLEAN


def cmd_run(command: list[str], output: str) -> int:
    strace = shutil.which("strace")
    if strace is None:
        raise UsageError("strace is not installed")
    if not command:
        raise UsageError("no command given; usage: fsracer run -- puppet apply site.pp --evaltrace")
    proc = subprocess.run([strace, "-f", "-y", "-s", "4096", "-o", output, *command])
    return proc.returncode


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsracer", description="Find missing ordering and notifier faults in Puppet runs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze an strace file against a catalog")
    a.add_argument("--trace", required=True, help="strace -f output, or - for stdin")
    a.add_argument("--catalog", required=True, help="compiled catalog JSON")
    a.add_argument("--format", choices=("text", "json"), default="text")
    a.add_argument("--dump-effects", metavar="FILE")
    a.add_argument("--ignore", action="append", metavar="PREFIX", help="extra ignored path prefix")
    a.add_argument("--cwd", default="/", help="initial working directory of the traced process")
    a.add_argument("--tagger", choices=("puppet", "null"), default="puppet")
    a.add_argument("--config", metavar="FILE", help="JSON with ignore, default_ignore, syscalls")
    a.add_argument("--no-expunge-as-produce", dest="expunge_as_produce", action="store_false")
    a.add_argument("--no-containment-edges", dest="containment_edges", action="store_false")

    g = sub.add_parser("graph", help="print the catalog dependency graph as DOT")
    g.add_argument("--catalog", required=True)
    g.add_argument("--no-containment-edges", dest="containment_edges", action="store_false")

    gen = sub.add_parser("gen", help="generate a synthetic trace, catalog and fault list")
    gen.add_argument("--size", type=parse_size, default=1 << 20, help="target trace size, e.g. 100M")
    gen.add_argument("--blocks", type=int, default=8)
    gen.add_argument("--paths", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--inject-mor", type=parse_pair, action="append", metavar="A,B")
    gen.add_argument("--inject-mn", type=parse_pair, action="append", metavar="A,B")

    r = sub.add_parser("run", help="record a command with strace")
    r.add_argument("-o", "--output", default="trace.strace")
    r.add_argument("cmd", nargs=argparse.REMAINDER)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="fsracer: %(message)s")
    try:
        if args.command == "analyze":
            return cmd_analyze(_config_from_args(args))
        if args.command == "graph":
            return cmd_graph(args.catalog, args.containment_edges)
        if args.command == "gen":
            return cmd_gen(args)
        cmd = args.cmd[1:] if args.cmd[:1] == ["--"] else args.cmd
        return cmd_run(cmd, args.output)
    except (UsageError, CatalogError, TraceParseError, FaultSpecError, OSError) as exc:
        print(f"fsracer: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
