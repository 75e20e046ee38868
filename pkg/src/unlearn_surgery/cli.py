"""``unlearn-surgery`` command-line entry point.

Every artifact lands in ``output_dir`` and carries the config hash:
checkpoints in their descriptor, JSON files as a ``config_hash`` field,
CSV files as a column. Wall-clock times go to ``*.timing.json`` sidecars so
that checkpoints stay byte-identical for a fixed config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config
from .data import make_split
from .errors import ClassifierGateError, DataError, DimensionError, NumericalError
from .experiment import (
    build_arch,
    build_eval,
    build_influence,
    build_train,
    build_unlearn,
    load_dataset,
    run_seed,
    train_classifier,
    trend_checks,
)
from .influence import ConvexProbe, VaeObjective, influence_audit, probe_validation_suite
from .metrics import FeatureClassifier, reports_to_csv, run_eval
from .surgeon import gradient_ascent_unlearn, one_shot_unlearn, retrain_oracle
from .vae import load_model, save_model, train

log = logging.getLogger("unlearn_surgery")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
METHODS = ("surgery", "ascent", "retrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers

class Run:
    """Resolved config plus output-path helpers for one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.out / name

    def write_json(self, name, payload: dict):
        path = self.path(name)
        path.write_text(json.dumps({**payload, "config_hash": self.hash}, indent=2, sort_keys=True) + "\n")
        return path

    def save_vae(self, model, name, wall_seconds):
        meta = {k: v for k, v in model.train_meta.items() if k != "wall_seconds"}
        stable = model.copy()
        stable.train_meta = meta
        path = save_model(stable, self.path(name), {"config_hash": self.hash})
        self.write_json(Path(name).stem + ".timing.json", {"wall_seconds": wall_seconds})
        return path


def _wall_seconds(ckpt: Path) -> float:
    side = ckpt.with_name(ckpt.stem + ".timing.json")
    if side.is_file():
        return float(json.loads(side.read_text())["wall_seconds"])
    return float("nan")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _load_classifier(run: Run, path=None):
    return FeatureClassifier.load(_require(Path(path) if path else run.path("clf.vaeu"), "classifier checkpoint"))


def _reference(cfg, ds, split):
    return split.retain_images if cfg["eval"]["reference"] == "retain" else ds.images


# ---------------------------------------------------------------------------
# commands

def cmd_train(run: Run, args) -> int:
    cfg = run.cfg
    ds = load_dataset(cfg)
    run.write_json("manifest.json", ds.manifest())
    model = train(build_arch(cfg), ds.images, build_train(cfg), dataset_id=ds.source_id)
    run.save_vae(model, "before.vaeu", model.train_meta["wall_seconds"])
    try:
        clf = train_classifier(cfg, ds)
    except ClassifierGateError as exc:
        clf = exc.classifier
        log.warning("%s; saving it anyway, evaluation will be flagged", exc)
    clf.save(run.path("clf.vaeu"), {"config_hash": run.hash})
    print(f"wrote {run.path('before.vaeu')} and {run.path('clf.vaeu')} (classifier accuracy {clf.accuracy:.4f})")
    return EXIT_OK


def cmd_unlearn(run: Run, args) -> int:
    cfg = run.cfg
    ds = load_dataset(cfg)
    split = make_split(ds, forget_class=cfg["data"]["forget_class"])
    if args.method == "retrain":
        model = retrain_oracle(build_arch(cfg), split, build_train(cfg))
        run.save_vae(model, "retrain.vaeu", model.train_meta["wall_seconds"])
        print(f"retrained on {split.retain.size} samples in {model.train_meta['wall_seconds']:.2f}s")
        return EXIT_OK
    before = load_model(_require(Path(args.model) if args.model else run.path("before.vaeu"),
                                 "BEFORE checkpoint"))
    fn = one_shot_unlearn if args.method == "surgery" else gradient_ascent_unlearn
    model, trace = fn(before, split, build_unlearn(cfg, args.method))
    run.save_vae(model, f"{args.method}.vaeu", trace.wall_seconds)
    trace.to_jsonl(run.path(f"{args.method}.trace.jsonl"), run.hash)
    print(f"{args.method}: {len(trace.steps)} steps in {trace.wall_seconds:.3f}s"
          + (" (aborted on divergence)" if trace.aborted else ""))
    return EXIT_NUMERICAL if trace.aborted else EXIT_OK


def cmd_eval(run: Run, args) -> int:
    cfg = run.cfg
    if args.models:
        paths = [_require(Path(p), "checkpoint") for p in args.models]
    else:
        paths = [run.path(f"{n}.vaeu") for n in ("before", *METHODS) if run.path(f"{n}.vaeu").is_file()]
        if not paths:
            raise DataError(f"no checkpoints found in {run.out}")
    clf = _load_classifier(run, args.classifier)
    models = [load_model(p) for p in paths]
    hashes = {m.descriptor.get("config_hash") for m in models} | {clf.descriptor.get("config_hash")}
    if len(hashes) > 1 and not args.allow_mixed:
        raise DataError(f"inputs come from different configs {sorted(map(str, hashes))}; "
                        "pass --allow-mixed to compare them anyway")
    ds = load_dataset(cfg)
    split = make_split(ds, forget_class=cfg["data"]["forget_class"])
    reports = []
    for path, model in zip(paths, models):
        rep = run_eval(model, clf, build_eval(cfg), _reference(cfg, ds, split), label=path.stem,
                       wall_seconds=_wall_seconds(path))
        rep.config_hash = run.hash
        run.path(f"{path.stem}.eval.json").write_text(rep.to_json() + "\n")
        reports.append(rep)
    run.path("eval.csv").write_text(reports_to_csv(reports))
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK


def cmd_influence_audit(run: Run, args) -> int:
    cfg = run.cfg
    icfg = cfg["influence"]
    solver = build_influence(cfg) if icfg["loss_influence"] else None
    if icfg["target"] == "probe":
        pcfg = icfg["probe"]
        probe = ConvexProbe.synthetic(n=pcfg["n"], d=pcfg["d"], lam=pcfg["lam"], seed=cfg["seed"])
        suite = probe_validation_suite(probe, seed=cfg["seed"])
        rng = np.random.default_rng([cfg["seed"], 71])
        forget = rng.choice(probe.n, max(2, probe.n // 10), replace=False)
        retain = np.setdiff1d(np.arange(probe.n), forget)
        audit = influence_audit(probe, forget, retain, icfg["n_pairs"], icfg["forget_batch"],
                                icfg["zprime_batch"], cfg["seed"], solver)
        payload = {"target": "probe", "validation": suite}
    elif icfg["target"] == "vae":
        model = load_model(_require(Path(args.model) if args.model else run.path("before.vaeu"),
                                    "checkpoint"))
        ds = load_dataset(cfg)
        split = make_split(ds, forget_class=cfg["data"]["forget_class"])
        rng = np.random.default_rng([cfg["seed"], 72])
        h_idx = rng.choice(len(ds), min(icfg["hessian_subsample"], len(ds)), replace=False)
        obj = VaeObjective(model, ds.images, seed=cfg["seed"], hessian_idx=h_idx)
        audit = influence_audit(obj, split.forget, split.retain, icfg["n_pairs"], icfg["forget_batch"],
                                icfg["zprime_batch"], cfg["seed"], solver)
        payload = {"target": "vae", "checkpoint": str(args.model or run.path("before.vaeu"))}
    else:
        raise ConfigError(f"unknown influence.target {icfg['target']!r}")
    payload.update(n_pairs=audit["n_pairs"], failures=audit["failures"],
                   mean_abs_conflict=audit["mean_abs_conflict"],
                   mean_abs_conflict_projected=audit["mean_abs_conflict_projected"],
                   pairs=[asdict(r) for r in audit["records"]])
    path = run.write_json("audit.json", payload)
    print(f"mean |conflict| {audit['mean_abs_conflict']:.4e} -> {audit['mean_abs_conflict_projected']:.4e} "
          f"after projection over {audit['n_pairs']} pairs ({audit['failures']} CG failures); wrote {path}")
    return EXIT_OK


def cmd_repro(run: Run, args) -> int:
    cfg = run.cfg
    ds = load_dataset(cfg)
    split = make_split(ds, forget_class=cfg["data"]["forget_class"])
    reference = _reference(cfg, ds, split)
    ecfg = build_eval(cfg)
    reports, seeds = [], []
    for seed in cfg["repro"]["seeds"]:
        res = run_seed(cfg, ds, seed, report=lambda msg: print(msg, flush=True))
        checks = trend_checks(res)
        clf = res["classifier"]
        for name, model in res["models"].items():
            wall = res["train_seconds"] if name == "before" else res[name]["wall_seconds"]
            run.save_vae(model, f"seed{seed}-{name}.vaeu", wall)
            rep = run_eval(model, clf, ecfg, reference, label=f"seed{seed}-{name}", wall_seconds=wall)
            rep.config_hash = run.hash
            reports.append(rep)
        clf.save(run.path(f"seed{seed}-clf.vaeu"), {"config_hash": run.hash})
        seeds.append({k: v for k, v in res.items() if k not in ("models", "classifier")} | {"checks": checks})
        print(f"seed {seed}: fratio x{checks['fratio_ratio']:.3f}, beats ascent {checks['b_beats_ascent']}, "
              f"time ratio {checks['time_ratio']:.4f}", flush=True)
    run.write_json("repro.json", {"seeds": seeds, "reports": [asdict(r) for r in reports]})
    run.path("repro.csv").write_text(reports_to_csv(reports))
    ok = all(all(s["checks"][k] for k in ("a_fratio_reduced", "b_beats_ascent", "c_time")) for s in seeds)
    print("trend checks:", "pass" if ok else "FAIL")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "eval": cmd_eval,
    "influence-audit": cmd_influence_audit,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unlearn-surgery", allow_abbrev=False, description="One-shot VAE unlearning by gradient surgery.",
                     epilog="Any --section.key=value argument overrides the config, e.g. --unlearn.lr=1e-3.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="shorthand for --seed=N override")
        p.add_argument("--output-dir", help="shorthand for --output_dir=DIR override")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "unlearn":
            p.add_argument("--method", choices=METHODS, default="surgery")
            p.add_argument("--model", help="BEFORE checkpoint (default: <output_dir>/before.vaeu)")
        if name == "eval":
            p.add_argument("--models", nargs="+", help="checkpoints to evaluate")
            p.add_argument("--classifier", help="classifier checkpoint (default: <output_dir>/clf.vaeu)")
            p.add_argument("--allow-mixed", action="store_true", help="accept inputs with differing config hashes")
        if name == "influence-audit":
            p.add_argument("--model", help="checkpoint to audit (default: <output_dir>/before.vaeu)")
    return parser


def _thread_limit():
    raw = os.environ.get("UNLEARN_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"UNLEARN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = build_parser().parse_known_args(argv)
        overrides = []
        for item in rest:
            if not (item.startswith("--") and "=" in item):
                raise UsageError(f"unrecognized argument {item!r} (overrides look like --section.key=value)")
            overrides.append(item)
        if args.seed is not None:
            overrides.append(f"--seed={args.seed}")
        if args.output_dir is not None:
            overrides.append(f"--output_dir={json.dumps(args.output_dir)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, overrides)
        with _thread_limit():
            return COMMANDS[args.command](Run(cfg), args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ClassifierGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # invalid config values rejected by the module configs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
