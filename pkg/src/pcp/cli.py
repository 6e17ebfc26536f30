"""``pcp`` command line: synth, train, eval, gradcheck, ablate.

Exit codes: 0 ok, 1 check failure, 2 input parse error, 3 dimension or
contract error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .diffcheck import GradCheckConfig, grad_check
from .losses import DegenerateBatch
from .metrics import CSV_HEADER, evaluate
from .network import DimensionError, ParamSet
from .priors import PriorsError, dump_groups, dump_priors, load_groups, load_priors, ConceptGroups
from .synthgen import SpecError, default_spec, generate, load_spec, read_dataset, spec_to_dict, write_dataset
from .trainer import TrainConfig, TrainingDiverged, aggregate, run_seeds, train

log = logging.getLogger("pcp")

EXIT_OK, EXIT_CHECK, EXIT_PARSE, EXIT_CONTRACT = 0, 1, 2, 3


class InputError(Exception):
    pass


@contextlib.contextmanager
def parsing(what: str):
    """Re-raise any failure while reading ``what`` as an InputError."""
    try:
        yield
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{what}: {exc}") from exc


def write_text(path: Path, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def write_json(path: Path, doc) -> None:
    write_text(path, json.dumps(doc, indent=2, sort_keys=True))


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, command: str, config, seeds, inputs, **extra) -> None:
    doc = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seeds": list(seeds),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "output_dir": str(out_dir),
        "tool_version": __version__,
    }
    doc.update(extra)
    write_json(out_dir / "manifest.json", doc)


def _read_json(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("expected a JSON object")
    return doc


def _train_config(args) -> TrainConfig:
    doc = _read_json(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(doc)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    for flag, key in (("beta", "beta"), ("lambda_kl", "lambda_kl"), ("lambda_ent", "lambda_ent"), ("epochs", "epochs")):
        if getattr(args, flag, None) is not None:
            changes[key] = getattr(args, flag)
    if getattr(args, "disable_kl", False):
        changes["disable_kl"] = True
    if getattr(args, "disable_ent", False):
        changes["disable_ent"] = True
    return cfg.replace(**changes) if changes else cfg


def _priors_and_groups(args):
    data_dir = Path(args.data)
    priors_path = Path(args.priors) if args.priors else data_dir / "priors.csv"
    with parsing(f"priors {priors_path}"):
        table = load_priors(priors_path)
    groups_path = Path(args.groups) if getattr(args, "groups", None) else data_dir / "groups.json"
    if groups_path.exists():
        with parsing(f"groups {groups_path}"):
            groups = load_groups(groups_path, table)
    else:
        groups = ConceptGroups.from_groups([], table.n_concepts)
        groups_path = None
    return table, groups, priors_path, groups_path


def _check_dims(ds, table):
    for name in ("train", "val", "test"):
        split = ds.split(name)
        if split.c.size and split.c.shape[1] != table.n_concepts:
            raise DimensionError(f"{name} split has {split.c.shape[1]} concepts, priors have {table.n_concepts}")
        if split.y.max() >= table.n_classes:
            raise DimensionError(f"{name} split has labels beyond the {table.n_classes} prior classes")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    with parsing(f"spec {args.config}" if args.config else "default spec"):
        spec = load_spec(args.config) if args.config else default_spec()
    out = Path(args.out)
    ds = generate(spec, args.seed)
    write_dataset(ds, out)
    write_text(out / "priors.csv", dump_priors(spec.priors))
    write_text(out / "groups.json", dump_groups(spec.groups, spec.priors))
    write_json(out / "spec.json", spec_to_dict(spec))
    write_manifest(out, "synth", spec_to_dict(spec), [args.seed], {"spec": args.config})
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    with parsing("training config"):
        cfg = _train_config(args)
    table, groups, priors_path, groups_path = _priors_and_groups(args)
    with parsing(f"dataset {args.data}"):
        ds = read_dataset(args.data)
    _check_dims(ds, table)
    out = Path(args.out)
    start = time.perf_counter()
    if len(cfg.seeds) >= 2:
        result = run_seeds(cfg, ds, table, groups, n_jobs=args.jobs)
        logs, reports = result["logs"], result["reports"]
        write_json(out / "aggregate.json", {k: result[k] for k in ("seeds", "per_seed", "mean", "std")})
    else:
        logs = [train(cfg, ds, table, groups, cfg.seeds[0])]
        reports = [evaluate(logs[0].params, ds.test, table, groups, seed=cfg.seeds[0], train_split=ds.train)]
    for lg, rep in zip(logs, reports):
        write_text(out / f"checkpoint_seed{lg.seed}.json", lg.params.to_json())
        write_text(out / f"trainlog_seed{lg.seed}.json", lg.to_json())
        write_text(out / f"metrics_seed{lg.seed}.json", rep.to_json())
    write_manifest(
        out, "train", cfg.to_dict(), cfg.seeds,
        {"config": args.config, "data": args.data, "priors": priors_path, "groups": groups_path},
        wall_clock_s={str(lg.seed): lg.wall_clock_s for lg in logs},
        total_wall_clock_s=time.perf_counter() - start,
    )
    for lg in logs:
        last = lg.epochs[-1]["train"] if lg.epochs else {}
        print(f"seed {lg.seed}: final train loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with parsing(f"checkpoint {args.checkpoint}"):
        params = ParamSet.from_json(Path(args.checkpoint).read_text(encoding="utf-8"))
    table, groups, priors_path, _ = _priors_and_groups(args)
    with parsing(f"dataset {args.data}"):
        ds = read_dataset(args.data)
    _check_dims(ds, table)
    report = evaluate(params, ds.split(args.split), table, groups, seed=args.seed, train_split=ds.train)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        write_text(out, text)
        write_manifest(out.parent, "eval", {"split": args.split}, [args.seed],
                       {"checkpoint": args.checkpoint, "data": args.data, "priors": priors_path})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    with parsing("gradcheck config"):
        doc = _read_json(args.config) if args.config else {}
        for flag in ("beta", "lambda_kl", "lambda_ent"):
            if getattr(args, flag) is not None:
                doc[flag] = getattr(args, flag)
        cfg = GradCheckConfig.from_dict(doc)
    report = grad_check(cfg, args.seed, fault=args.inject_fault)
    text = report.to_json()
    if args.out:
        write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_CHECK


ABLATION_ROWS = ((False, False), (False, True), (True, False), (True, True))


def cmd_ablate(args) -> int:
    with parsing("training config"):
        cfg = _train_config(args)
    table, groups, priors_path, groups_path = _priors_and_groups(args)
    with parsing(f"dataset {args.data}"):
        ds = read_dataset(args.data)
    _check_dims(ds, table)
    out = Path(args.out)
    rows = []
    for use_kl, use_ent in ABLATION_ROWS:
        variant = cfg.replace(disable_kl=not use_kl, disable_ent=not use_ent)
        if len(variant.seeds) >= 2:
            result = run_seeds(variant, ds, table, groups, n_jobs=args.jobs)
            per_seed, agg = result["per_seed"], {k: result[k] for k in ("mean", "std")}
        else:
            lg = train(variant, ds, table, groups, variant.seeds[0])
            per_seed = [evaluate(lg.params, ds.test, table, groups, seed=variant.seeds[0], train_split=ds.train).scalars()]
            agg = {"mean": per_seed[0], "std": {k: 0.0 for k in per_seed[0]}}
        rows.append({"kl": use_kl, "ent": use_ent, "per_seed": per_seed, **agg})
        log.info("ablation kl=%s ent=%s: %s", use_kl, use_ent, agg["mean"])
    write_json(out / "ablation.json", {"seeds": list(cfg.seeds), "rows": rows})
    keys = ("concept_acc", "concept_f1", "class_f1", "entropy", "tv_mean")
    lines = ["kl,ent," + ",".join(f"{k},{k}_std" for k in keys)]
    for r in rows:
        vals = [f"{r['mean'][k]:.6f},{r['std'][k]:.6f}" for k in keys]
        lines.append(f"{int(r['kl'])},{int(r['ent'])}," + ",".join(vals))
    write_text(out / "ablation.csv", "\n".join(lines))
    write_manifest(out, "ablate", cfg.to_dict(), cfg.seeds,
                   {"config": args.config, "data": args.data, "priors": priors_path, "groups": groups_path})
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pcp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_training_flags(p):
        p.add_argument("--config", help="TrainConfig JSON")
        p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
        p.add_argument("--priors", help="priors CSV (default: DATA/priors.csv)")
        p.add_argument("--groups", help="groups JSON (default: DATA/groups.json)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, help="train a single seed instead of the config's list")
        p.add_argument("--epochs", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--lambda-kl", type=float)
        p.add_argument("--lambda-ent", type=float)
        p.add_argument("--disable-kl", action="store_true")
        p.add_argument("--disable-ent", action="store_true")
        p.add_argument("--jobs", type=int, default=1, help="train seeds in parallel processes")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthSpec JSON (default: built-in task)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one or more seeds")
    add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--priors")
    p.add_argument("--groups")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", help="GradCheckConfig JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda-kl", type=float)
    p.add_argument("--lambda-ent", type=float)
    p.add_argument("--out")
    p.add_argument("--inject-fault", metavar="BLOCK", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the four KL/entropy ablation configurations")
    add_training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, PriorsError, SpecError) as exc:
        print(f"pcp: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (DimensionError, DegenerateBatch) as exc:
        print(f"pcp: contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except TrainingDiverged as exc:
        print(f"pcp: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
