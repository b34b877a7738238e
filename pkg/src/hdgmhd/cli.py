"""Command-line driver: convergence studies for the manufactured examples.

Exit codes: 0 success, 2 configuration error, 3 Oseen non-convergence,
4 singular linear system.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .exceptions import NonConvergenceError, SingularSystemError
from .forms import PhysicalParameters
from .verification import ConvergenceReport, convergence_study

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_SINGULAR = 0, 2, 3, 4
PARAM_KEYS = ("Ha", "N", "Re", "Rm", "Pr", "Gr")
DECISIONS = (
    "stop criterion: L2 norm of the interior velocity update",
    "unspecified parameters Re, Pr, Gr default to 1",
    "pseudo-pressure error measured modulo constants",
)


@dataclass
class RunConfig:
    example: int = 1
    k: int = 1
    levels: list = field(default_factory=lambda: [4, 8])
    tol: float = 1e-8
    max_iter: int = 50
    out: str = "results"
    format: str = "both"
    backend: str = "auto"
    params: dict = field(default_factory=lambda: {key: 1.0 for key in PARAM_KEYS})
    params_file: str | None = None

    def validate(self) -> None:
        if self.example not in (1, 2):
            raise ValueError("example must be 1 or 2")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be an integer >= 1")
        if not self.levels:
            raise ValueError("levels must not be empty")
        if any(m < 1 for m in self.levels):
            raise ValueError("mesh levels must be positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max-iter must be >= 1")
        if self.format not in ("csv", "table", "both"):
            raise ValueError("format must be csv, table or both")
        PhysicalParameters(**self.params)

    def canonical(self) -> dict:
        """Fields that determine the numbers (output location excluded)."""
        d = asdict(self)
        for key in ("out", "format", "params_file"):
            d.pop(key)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def read_params_file(path: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _levels(text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise ValueError(f"bad level list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdgmhd", description=__doc__.splitlines()[0])
    src = p.add_mutually_exclusive_group()
    src.add_argument("--example", type=int, choices=(1, 2), help="manufactured example (default 1)")
    src.add_argument("--params", metavar="FILE", help="key = value file (Ha, N, Re, Rm, Pr, Gr, example, ...)")
    p.add_argument("--k", type=int, default=None, help="polynomial degree k >= 1 (default 1)")
    p.add_argument("--levels", default=None, help="comma-separated mesh levels M (default 4,8)")
    p.add_argument("--tol", type=float, default=None, help="Oseen stop tolerance (default 1e-8)")
    p.add_argument("--max-iter", type=int, default=None, help="Oseen iteration cap (default 50)")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--format", choices=("csv", "table", "both"), default="both")
    p.add_argument("--backend", choices=("auto", "superlu", "pardiso"), default="auto",
                   help="sparse direct solver")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(out=args.out, format=args.format, backend=args.backend)
    if args.params:
        raw = read_params_file(args.params)
        cfg.params_file = args.params
        for key in PARAM_KEYS:
            if key in raw:
                cfg.params[key] = float(raw.pop(key))
        if "example" in raw:
            cfg.example = int(raw.pop("example"))
        if "k" in raw:
            cfg.k = int(raw.pop("k"))
        if "levels" in raw:
            cfg.levels = _levels(raw.pop("levels"))
        if "tol" in raw:
            cfg.tol = float(raw.pop("tol"))
        if "max_iter" in raw:
            cfg.max_iter = int(raw.pop("max_iter"))
        if raw:
            raise ValueError(f"unknown keys in {args.params}: {', '.join(sorted(raw))}")
    if args.example is not None:
        cfg.example = args.example
    if args.k is not None:
        cfg.k = args.k
    if args.levels is not None:
        cfg.levels = _levels(args.levels)
    if args.tol is not None:
        cfg.tol = args.tol
    if args.max_iter is not None:
        cfg.max_iter = args.max_iter
    cfg.validate()
    return cfg


def provenance(cfg: RunConfig) -> str:
    lines = [f"# config_hash {cfg.hash()}", f"# config {json.dumps(cfg.canonical(), sort_keys=True)}"]
    if cfg.params_file:
        lines.append(f"# params_file {cfg.params_file}")
    lines += [f"# decision: {d}" for d in DECISIONS]
    return "\n".join(lines) + "\n"


def _write_reports(cfg: RunConfig, out: Path, report: ConvergenceReport, header: str) -> None:
    h = cfg.hash()
    if cfg.format in ("csv", "both"):
        (out / "errors.csv").write_text(report.to_csv(h))
    if cfg.format in ("table", "both"):
        (out / "convergence.txt").write_text(header + report.to_table(config_hash=h))


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = provenance(cfg)
    (out / "provenance.txt").write_text(header)
    done = []

    def on_level(level):
        done.append(level)
        lines = [header + f"# level M={level.M} k={cfg.k}"]
        lines += [rec.line() for rec in level.log]
        (out / f"oseen_M{level.M}.log").write_text("\n".join(lines) + "\n")
        _write_reports(cfg, out, ConvergenceReport(f"example{cfg.example}", cfg.k, list(done)), header)
        print(f"M={level.M}: {len(level.log)} Oseen iterations, rel. L2 error u = {level.report.u:.4e}",
              flush=True)

    params = PhysicalParameters(**cfg.params)
    try:
        report = convergence_study(cfg.example, cfg.k, cfg.levels, cfg.tol, cfg.max_iter, params,
                                   on_level=on_level, backend=cfg.backend)
    except NonConvergenceError as exc:
        M = getattr(exc, "M", "?")
        lines = [header + f"# level M={M} k={cfg.k} (not converged)"] + [rec.line() for rec in exc.log]
        (out / f"oseen_M{M}.log").write_text("\n".join(lines) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SingularSystemError as exc:
        print(f"error: singular system: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    if cfg.format in ("table", "both"):
        sys.stdout.write(report.to_table(config_hash=cfg.hash()))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
