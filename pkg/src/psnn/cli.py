"""Command-line entry point: ``psnn <command> [flags]``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage,
configuration or missing-input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import fnmatch
import importlib
import logging
import re
import shlex
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from .errors import (
    ConfigurationError,
    ContractViolation,
    DivergedTrainingError,
    MissingInputError,
    ParseError,
    PsnnError,
)

log = logging.getLogger("psnn")

USER_ERRORS = (ConfigurationError, ContractViolation, MissingInputError, ParseError)

# Files each command may write, relative to the configured directories.
ARTIFACTS = {
    "gen-data": ["data/observations-complete.jsonl", "data/observations-incomplete.jsonl"],
    "train": ["checkpoints/*-*-s*.json", "checkpoints/*-*-s*.loss.csv", "checkpoints/*-*-s*.meta.json"],
    "cut-search": ["out/cut-*-s*.csv"],
    "locate": ["out/locate-*-s*.csv"],
    "phase-diagram": ["out/phase-*-s*.csv", "out/phase-*-s*.svg"],
    "evaluate": ["out/error_table.csv", "out/recovery.csv"],
    "kernel-check": ["out/kernel_eigenvalues.csv", "out/kernel_truncation.csv", "out/kernel_eigenvalues.svg"],
    "meanshift": ["out/meanshift-*-s*.csv"],
    "sweep": ["out/sweep.csv", "out/sweep.svg", "out/sweep-smoke.csv", "out/sweep-smoke.svg"],
    "doc-check": [],
}

CRITERIA = ("C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8")


class _Parser(argparse.ArgumentParser):
    """Parser that raises instead of exiting when ``raise_errors`` is set (used by doc-check)."""

    raise_errors = False

    def error(self, message):
        if self.raise_errors:
            raise ConfigurationError(message)
        super().error(message)


def _config_epilog() -> str:
    lines = ["config fields (YAML sections; override with --set section.field=value):"]
    for name, default, text in config_mod.iter_fields():
        lines.append(f"  {name:<30} default {default!r:<18} {text}")
    return "\n".join(lines)


def _theta(text):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return np.array(vals)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration (default: built-in defaults)")
    common.add_argument("--seed", type=int, metavar="N", help="seed for this command (data seed for gen-data, training seed otherwise)")
    common.add_argument("--workers", type=int, metavar="N", help="worker processes (default 1)")
    common.add_argument("--out", metavar="DIR", help="output directory (default out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(
        prog="psnn",
        description="Learn, locate and classify steady states of a parameterized system.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)

    ds = dict(choices=("complete", "incomplete"), default="complete", help="observation set (default complete)")

    p = add("gen-data", "write the observation file(s)")
    p.add_argument("--mask", nargs="?", type=int, const=-1, metavar="N",
                   help="also write the incomplete variant with N masked records (default data.mask)")

    p = add("train", "train one network and write its checkpoint")
    p.add_argument("--channel", choices=("solution", "stability"), required=True)
    p.add_argument("--dataset", **ds)
    p.add_argument("--force", action="store_true", help="retrain even if a matching checkpoint exists")

    p = add("cut-search", "choose the cut value on the search split")
    p.add_argument("--dataset", **ds)

    p = add("locate", "print solution centers and stability labels at one parameter")
    p.add_argument("--theta", type=_theta, required=True, metavar="F,K")
    p.add_argument("--dataset", **ds)
    p.add_argument("--cut", type=float, metavar="L", help="cut value (default: from cut-search)")

    p = add("phase-diagram", "predicted solution counts and stability classes over a parameter grid")
    p.add_argument("--dataset", **ds)

    p = add("evaluate", "error table over the configured runs and incomplete-data recovery")
    p.add_argument("--train-missing", action="store_true", help="train checkpoints that do not exist yet")
    p.add_argument("--methods", default="psnn,mean-shift", help="comma-separated subset of psnn,mean-shift")

    add("kernel-check", "eigen-decomposition of the discretized target kernel")

    p = add("meanshift", "baseline locator on the test split, or at one parameter")
    p.add_argument("--dataset", **ds)
    p.add_argument("--theta", type=_theta, metavar="F,K")

    p = add("sweep", "test error across network sizes")
    p.add_argument("--smoke", action="store_true", help="reduced sweep (smoke_Ns x smoke_depths)")
    p.add_argument("--force", action="store_true", help="retrain even if a matching sweep table exists")

    p = add("doc-check", "validate the reproduction recipes against this CLI")
    p.add_argument("--docs", default=None, metavar="DIR", help="documentation directory (default: docs next to the package)")
    return parser


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg = config_mod.set_field(cfg, key.strip(), _parse_value(value))
        except KeyError:
            raise ConfigurationError(f"unknown config field {key.strip()}") from None
        except TypeError:
            raise ConfigurationError(f"unknown config field {key.strip()}") from None
    if args.workers is not None:
        cfg = config_mod.set_field(cfg, "workers", args.workers)
    if args.out is not None:
        cfg = config_mod.set_field(cfg, "paths.output_dir", args.out)
    if args.seed is not None:
        field = "data.seed" if args.command == "gen-data" else "train.seed"
        cfg = config_mod.set_field(cfg, field, args.seed)
    return config_mod.validate(cfg)


def _out(pipe, name) -> Path:
    pipe.out_dir.mkdir(parents=True, exist_ok=True)
    return pipe.out_dir / name


# -- commands ----------------------------------------------------------------


def cmd_gen_data(pipe, args):
    mask = args.mask is not None
    count = None if args.mask in (None, -1) else args.mask
    for path in pipe.generate_data(mask, count):
        print(path)


def cmd_train(pipe, args):
    seed = pipe.cfg.train.seed
    try:
        model, report = pipe.train_model(args.dataset, args.channel, seed, reuse=not args.force)
    except DivergedTrainingError as exc:
        if exc.report is not None:
            pipe._write_loss(pipe.checkpoint_path(args.dataset, args.channel, seed), exc.report)
        raise
    path = pipe.checkpoint_path(args.dataset, args.channel, seed)
    status = "reused" if report is None else f"test_mse={report.test_mse:.6g}"
    print(f"{path} {status}")


def cmd_cut_search(pipe, args):
    sol = pipe.load_model(args.dataset, "solution", pipe.cfg.train.seed)
    result = pipe.cut_value(args.dataset, pipe.cfg.train.seed, sol)
    print(f"L_cut={result.cut:.6g}")


def cmd_locate(pipe, args):
    from .locate import locate, write_locate_csv

    seed = pipe.cfg.train.seed
    if len(args.theta) != pipe.omega.dim:
        raise ConfigurationError(f"--theta needs {pipe.omega.dim} values, got {len(args.theta)}")
    sol, stab = pipe.models(args.dataset, seed, train_missing=False)
    cut = args.cut if args.cut is not None else pipe.cut_value(args.dataset, seed, sol).cut
    res = locate(sol, stab, args.theta, pipe.grid, cut, pipe.cluster)
    for c, label in zip(res.centers, res.labels):
        print(" ".join(f"{x:.6f}" for x in c), label)
    if res.count == 0:
        print("no solutions")
    write_locate_csv(_out(pipe, f"locate-{args.dataset}-s{seed}.csv"), [res], ["f", "k"], ["u", "v"], pipe.cluster.c_max)


def cmd_phase_diagram(pipe, args):
    from .evaluate import emit_svg

    seed = pipe.cfg.train.seed
    diagram = pipe.phase_diagram(args.dataset, seed, train_missing=False)
    stem = f"phase-{args.dataset}-s{seed}"
    diagram.to_csv(_out(pipe, stem + ".csv"))
    emit_svg(diagram, _out(pipe, stem + ".svg"), title=f"{args.dataset} data, seed {seed}")
    print(f"count agreement {diagram.count_agreement():.4f}  stability agreement {diagram.stability_agreement():.4f}")


def cmd_evaluate(pipe, args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    bad = [m for m in methods if m not in ("psnn", "mean-shift")]
    if bad:
        raise ConfigurationError(f"--methods: unknown method {bad[0]!r}")
    runs = pipe.cfg.evaluate.runs
    if not args.train_missing:
        for seed in runs:
            for dataset in ("complete", "incomplete"):
                for channel in ("solution", "stability"):
                    pipe.load_model(dataset, channel, seed)
    rows = pipe.error_table(runs, methods)
    for r in rows:
        print(f"{r['method']:<10} {r['dataset']:<10} {r['split']:<9} wrong_soln={r['wrong_soln']:.4f} "
              f"distance={r['distance']:.4f} wrong_stb={r['wrong_stb']:.4f}")
    if "psnn" in methods:
        for seed, rate in zip(runs, pipe.recovery_rates(runs)):
            print(f"recovery seed {seed}: {rate:.4f}")


def cmd_kernel_check(pipe, args):
    from .evaluate import emit_svg

    report = pipe.kernel_check()
    report.to_csv(_out(pipe, "kernel_eigenvalues.csv"), _out(pipe, "kernel_truncation.csv"))
    emit_svg(report, _out(pipe, "kernel_eigenvalues.svg"))
    for n, e, t, r in zip(report.Ns, report.trunc_err_sq, report.tail_sum, report.relative_mismatch()):
        print(f"N={n:<3} trunc_err_sq={e:.10e} tail_sum={t:.10e} rel_mismatch={r:.2e}")
    print(f"decay exponent {report.decay_exponent:.3f}")


def cmd_meanshift(pipe, args):
    from .locate import write_locate_csv

    seed = pipe.cfg.train.seed
    loc = pipe.meanshift_locator(args.dataset, seed)
    if args.theta is not None:
        res = loc(args.theta)
        for c, label in zip(res.centers, res.labels):
            print(" ".join(f"{x:.6f}" for x in c), label)
        if res.count == 0:
            print("no solutions")
        results = [res]
    else:
        from .evaluate import error_metrics
        from .locate import _map

        test = pipe.observations("complete").split("test")
        results = _map(loc, [r.theta for r in test], pipe.cfg.workers)
        m = error_metrics(results, test, pipe.domain)
        print(f"wrong_soln={m['wrong_soln']:.4f} distance={m['distance']:.4f} wrong_stb={m['wrong_stb']:.4f}")
    write_locate_csv(_out(pipe, f"meanshift-{args.dataset}-s{seed}.csv"), results, ["f", "k"], ["u", "v"], pipe.cluster.c_max)


def cmd_sweep(pipe, args):
    from .evaluate import emit_svg

    stem = "sweep-smoke" if args.smoke else "sweep"
    rows = pipe.sweep(args.smoke, _out(pipe, stem + ".csv"), reuse=not args.force)
    emit_svg(rows, _out(pipe, stem + ".svg"))
    from .training import mean_by_cell

    for cell, mse in mean_by_cell(rows).items():
        print("N={} L1={} W1={} L2={} W2={}".format(*cell), f"mean test MSE {mse:.4e}")


def cmd_doc_check(pipe, args):
    docs = Path(args.docs) if args.docs else default_docs_dir()
    problems = doc_check(docs)
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        raise ConfigurationError(f"doc-check found {len(problems)} problem(s)")
    print(f"doc-check passed ({docs})")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cut-search": cmd_cut_search,
    "locate": cmd_locate,
    "phase-diagram": cmd_phase_diagram,
    "evaluate": cmd_evaluate,
    "kernel-check": cmd_kernel_check,
    "meanshift": cmd_meanshift,
    "sweep": cmd_sweep,
    "doc-check": cmd_doc_check,
}


# -- documentation checks ----------------------------------------------------


def default_docs_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "docs"


RECIPE_RE = re.compile(r"^## Recipe (C\d+):", re.M)


def parse_recipes(text: str) -> dict:
    """Recipe id -> {"commands": [...], "artifacts": [...], "tolerance": str}."""
    out = {}
    starts = [(m.group(1), m.start()) for m in RECIPE_RE.finditer(text)]
    for i, (rid, pos) in enumerate(starts):
        end = starts[i + 1][1] if i + 1 < len(starts) else len(text)
        body = text[pos:end]
        commands = []
        for block in re.findall(r"```(?:sh|bash)?\n(.*?)```", body, re.S):
            for line in block.splitlines():
                line = line.strip()
                if line.startswith("psnn "):
                    commands.append(line)
        arts = re.search(r"^Artifacts:(.*)$", body, re.M)
        tol = re.search(r"^Tolerance:(.*)$", body, re.M)
        out.setdefault(rid, []).append({
            "commands": commands,
            "artifacts": [a.strip().strip("`") for a in arts.group(1).split(",") if a.strip() not in ("", "none")] if arts else [],
            "tolerance": tol.group(1).strip() if tol else "",
        })
    return out


def _produced(path: str, commands) -> bool:
    for cmd in commands:
        if any(fnmatch.fnmatch(path, pat) for pat in ARTIFACTS.get(cmd, [])):
            return True
    return False


def check_recipe_commands(rid, recipe, parser) -> list:
    problems, used = [], []
    for line in recipe["commands"]:
        argv = shlex.split(line)[1:]
        _Parser.raise_errors = True
        try:
            ns = parser.parse_args(argv)
            used.append(ns.command)
        except ConfigurationError as exc:
            bad = re.search(r"unrecognized arguments: (\S+)", str(exc))
            problems.append(f"{rid}: stale command '{line}': " + (f"unknown flag {bad.group(1)}" if bad else str(exc)))
        except SystemExit:
            problems.append(f"{rid}: command '{line}' does not parse")
        finally:
            _Parser.raise_errors = False
    for art in recipe["artifacts"]:
        if not _produced(art, used or ARTIFACTS):
            problems.append(f"{rid}: artifact {art} is not produced by any of its commands")
    return problems


def check_concordance(text: str) -> list:
    """Every table row must name one importable target ``module.Attr[.field]``."""
    problems, seen = [], {}
    for line in text.splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")] if line.startswith("|") else []
        if len(cells) < 2 or cells[0] in ("Symbol", "") or set(cells[0]) <= set("-: "):
            continue
        symbol, target = cells[0], cells[1].strip("`")
        if symbol in seen:
            problems.append(f"concordance: symbol {symbol} mapped twice")
        seen[symbol] = target
        if not _resolvable(target):
            problems.append(f"concordance: {symbol} -> {target} does not resolve")
    return problems


def _resolvable(target: str) -> bool:
    parts = target.split(".")
    for cut in range(len(parts), 0, -1):
        try:
            obj = importlib.import_module(".".join(parts[:cut]))
        except ImportError:
            continue
        for name in parts[cut:]:
            if dataclasses.is_dataclass(obj) and isinstance(obj, type) and name in {f.name for f in dataclasses.fields(obj)}:
                fld = {f.name: f for f in dataclasses.fields(obj)}[name]
                obj = fld.default_factory() if fld.default_factory is not dataclasses.MISSING else fld.default
                continue
            if not hasattr(obj, name):
                return False
            obj = getattr(obj, name)
        return True
    return False


def doc_check(docs: Path) -> list:
    recipes_path, conc_path = docs / "recipes.md", docs / "concordance.md"
    problems = []
    if not recipes_path.is_file():
        return [f"missing {recipes_path}"]
    recipes = parse_recipes(recipes_path.read_text())
    for rid in CRITERIA:
        n = len(recipes.get(rid, []))
        if n != 1:
            problems.append(f"{rid}: expected exactly one recipe, found {n}")
    for rid in sorted(set(recipes) - set(CRITERIA)):
        problems.append(f"{rid}: recipe for an unknown criterion")
    parser = build_parser()
    for rid, items in sorted(recipes.items()):
        for recipe in items:
            if not recipe["tolerance"]:
                problems.append(f"{rid}: no tolerance statement")
            problems += check_recipe_commands(rid, recipe, parser)
    if conc_path.is_file():
        problems += check_concordance(conc_path.read_text())
    else:
        problems.append(f"missing {conc_path}")
    return problems


# -- entry point -------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        from .pipeline import Pipeline

        cfg = resolve_config(args)
        COMMANDS[args.command](Pipeline(cfg), args)
    except USER_ERRORS as exc:
        print(f"psnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PsnnError, OSError, ArithmeticError) as exc:
        print(f"psnn {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
