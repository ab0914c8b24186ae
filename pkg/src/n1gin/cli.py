"""Command-line entry point: ``n1gin <subcommand> [flags]``.

Settings resolve as built-in defaults, then the ``--config`` JSON file, then
explicit flags. The resolved settings are logged on every run. Exit codes:
0 success, 2 usage, 3 unparsable input, 4 invalid input, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from . import __version__

log = logging.getLogger("n1gin")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def sub_seed(master: int, name: str) -> int:
    """Stable 63-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# --- settings -----------------------------------------------------------------

DEFAULTS = {
    "generate": {"samples": 250, "balance": 0.5, "seed": 0, "threads": 1, "out": "dataset",
                 "test_fraction": 0.2, "val_fraction": 0.1, "locations": None},
    "label": {"max_deviation": 0.05, "threads": 1, "out": None},
    "augment": {"seed": 0, "max_deviation": 0.05, "out": "augmented", "threads": 1},
    "train": {"data": "dataset", "k": 15, "pooling": "Sum", "lr": 1e-4, "epochs": 100, "batch_size": 32,
              "seed": 0, "augmentation": True, "locations": None, "out": "model", "threads": 1},
    "eval": {"data": "dataset", "checkpoint": None, "plan": "loo", "k": [15], "pooling": ["Sum"], "seeds": [0],
             "lr": 1e-4, "epochs": 100, "batch_size": 32, "augmentation": True, "pfi_repeats": 0,
             "seed": 0, "out": "report", "threads": 1},
    "pfi": {"data": "dataset", "checkpoint": None, "repeats": 10, "seed": 0, "split": "test", "out": None,
            "threads": 1},
    "compare": {"data": "dataset", "checkpoint": None, "min_nodes": 40, "max_deviation": 0.05, "limit": 100,
                "split": "test", "out": None, "threads": 1},
}

PLAN_NAMES = {"single": "SingleLocation", "all": "AllLocations", "loo": "LeaveOneOut"}


def _pooling_name(text: str) -> str:
    return {"sum": "Sum", "mean": "Mean", "max": "Max"}.get(str(text).lower(), str(text))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="n1gin", description="n-1 reliability of MV grids: exact labels and a GIN")
    p.add_argument("--version", action="version", version=f"n1gin {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="JSON file with settings (flags take precedence)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--threads", type=int, help="worker processes")
        if out:
            sp.add_argument("--out", help="output directory or file")

    g = sub.add_parser("generate", help="build a labelled, augmented dataset")
    common(g)
    g.add_argument("--samples", type=int, help="base samples per location")
    g.add_argument("--balance", type=float, help="fraction of n-1 samples per location")
    g.add_argument("--test-fraction", type=float, dest="test_fraction")
    g.add_argument("--val-fraction", type=float, dest="val_fraction")

    lab = sub.add_parser("label", help="exact n-1 label and switching witness of one grid file")
    common(lab, seed=False)
    lab.add_argument("grid", help="grid JSON file")
    lab.add_argument("--max-deviation", type=float, dest="max_deviation")

    a = sub.add_parser("augment", help="change the topology of one grid file once")
    common(a)
    a.add_argument("grid", help="grid JSON file")
    a.add_argument("--max-deviation", type=float, dest="max_deviation")

    t = sub.add_parser("train", help="train a GIN on a dataset's train split")
    common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--k", type=int, help="GIN layers")
    t.add_argument("--pooling", type=_pooling_name, choices=["Sum", "Mean", "Max"])
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--no-augmentation", dest="augmentation", action="store_const", const=False)
    t.add_argument("--locations", nargs="+")

    e = sub.add_parser("eval", help="evaluate a checkpoint, or run an experiment plan")
    common(e)
    e.add_argument("--data")
    e.add_argument("--checkpoint", help="evaluate this model per location instead of training")
    e.add_argument("--plan", choices=sorted(PLAN_NAMES))
    e.add_argument("--k", type=int, nargs="+")
    e.add_argument("--pooling", type=_pooling_name, nargs="+")
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--lr", type=float)
    e.add_argument("--epochs", type=int)
    e.add_argument("--batch-size", type=int, dest="batch_size")
    e.add_argument("--no-augmentation", dest="augmentation", action="store_const", const=False)
    e.add_argument("--pfi-repeats", type=int, dest="pfi_repeats")

    f = sub.add_parser("pfi", help="permutation feature importance of a checkpoint")
    common(f)
    f.add_argument("--data")
    f.add_argument("--checkpoint")
    f.add_argument("--repeats", type=int)
    f.add_argument("--split", choices=["test", "val", "train"])

    c = sub.add_parser("compare", help="time the exact labelling against GIN inference")
    common(c, seed=False)
    c.add_argument("--data")
    c.add_argument("--checkpoint")
    c.add_argument("--min-nodes", type=int, dest="min_nodes")
    c.add_argument("--max-deviation", type=float, dest="max_deviation")
    c.add_argument("--limit", type=int, help="at most this many grids")
    c.add_argument("--split", choices=["test", "val", "train"])
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_RUNTIME) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}", EXIT_PARSE) from exc
        if not isinstance(doc, dict):
            raise CliError(f"{args.config}: expected a JSON object", EXIT_VALIDATION)
        unknown = set(doc) - set(settings)
        if unknown:
            raise CliError(f"{args.config}: unknown settings for {command}: {sorted(unknown)}", EXIT_VALIDATION)
        settings.update(doc)
    for key, val in vars(args).items():
        if key in ("command", "config", "verbose") or val is None:
            continue
        settings[key] = val
    return settings


# --- helpers ------------------------------------------------------------------


def _emit(text: str, out: Optional[str]) -> None:
    print(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


def _load_grid_file(path: str):
    from .grid import GridFormatError, load_grid, validate_grid

    try:
        grid = load_grid(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_RUNTIME) from exc
    except GridFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from exc
    report = validate_grid(grid)
    if not report.ok:
        raise CliError(f"{path}: invalid grid: " + "; ".join(report.problems), EXIT_VALIDATION)
    return grid


def _load_data(path: str):
    from .synth import load_dataset

    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise CliError(f"{root} is not a dataset directory (no manifest.json)", EXIT_RUNTIME)
    return load_dataset(root)


def _load_model(path: Optional[str]):
    from .gin import CheckpointError, load_checkpoint

    if not path:
        raise CliError("--checkpoint is required", EXIT_USAGE)
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} does not exist", EXIT_RUNTIME)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from exc


def _split(manifest, samples, split: str, generated_only: bool = True):
    from .grid import Provenance

    return [samples[e.id] for e in manifest.entries
            if e.split == split and (not generated_only or e.provenance is Provenance.GENERATED)]


# --- subcommands --------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    from .synth import GeneratorConfig, build_dataset, default_locations

    if cfg["locations"] is None:
        configs = default_locations(n_samples=cfg["samples"], seed=cfg["seed"])
    else:
        try:
            configs = [GeneratorConfig.from_dict({**loc, "seed": cfg["seed"]}) for loc in cfg["locations"]]
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid location config: {exc}", EXIT_VALIDATION) from exc
    try:
        configs = [GeneratorConfig.from_dict({**c.to_dict(), "n_samples": cfg["samples"],
                                              "balance": cfg["balance"]}) for c in configs]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from exc
    manifest, _ = build_dataset(configs, cfg["out"], seed=cfg["seed"], test_fraction=cfg["test_fraction"],
                                val_fraction=cfg["val_fraction"], workers=cfg["threads"])
    print(manifest.summary_table())
    print(f"wrote {len(manifest.entries)} samples to {cfg['out']}")
    return EXIT_OK


def cmd_label(cfg: dict) -> int:
    from .flow import label_n1

    grid = _load_grid_file(cfg["grid"])
    result = label_n1(grid, cfg["max_deviation"], workers=cfg["threads"])
    doc = {"label": result.label, "witness": result.witness_dict(), "elapsed_seconds": result.elapsed}
    _emit(json.dumps(doc, indent=1, sort_keys=True), cfg["out"])
    return EXIT_OK


def cmd_augment(cfg: dict) -> int:
    from .flow import compute_features, label_n1
    from .grid import LabeledSample, Provenance, dumps_grid
    from .synth import NoCandidatesError, augment

    grid = _load_grid_file(cfg["grid"])
    label = label_n1(grid, cfg["max_deviation"], full_witness=False).label
    sample = LabeledSample(grid, compute_features(grid), label, Provenance.GENERATED,
                           sample_id=Path(cfg["grid"]).stem)
    try:
        aug, record = augment(sample, sub_seed(cfg["seed"], "augment"), max_deviation=cfg["max_deviation"])
    except NoCandidatesError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(dumps_grid(aug.grid) + "\n")
    (out / "features.json").write_text(json.dumps(aug.features.to_dict(), sort_keys=True) + "\n")
    rec = {"source_id": record.source_id, "action": record.action.value, "affected": list(record.affected),
           "label": label, "label_verified": record.label_verified}
    (out / "record.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .gin import GinConfig, GinModel, save_checkpoint, train
    from .grid import Provenance

    manifest, samples = _load_data(cfg["data"])
    locs = set(cfg["locations"] or manifest.locations)
    unknown = locs - set(manifest.locations)
    if unknown:
        raise CliError(f"unknown locations {sorted(unknown)}", EXIT_VALIDATION)
    train_set = [samples[e.id] for e in manifest.entries if e.location in locs and e.split == "train"
                 and (cfg["augmentation"] or e.provenance is Provenance.GENERATED)]
    val_set = [samples[e.id] for e in manifest.entries if e.location in locs and e.split == "val"
               and e.provenance is Provenance.GENERATED]
    try:
        gcfg = GinConfig(k=cfg["k"], pooling=_pooling_name(cfg["pooling"]), lr=cfg["lr"], epochs=cfg["epochs"],
                         batch_size=cfg["batch_size"], seed=sub_seed(cfg["seed"], "train"))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from exc
    print(f"GIN-{gcfg.k} pooling={gcfg.pooling.value} lr={gcfg.lr:g} epochs={gcfg.epochs} "
          f"batch={gcfg.batch_size} train={len(train_set)} val={len(val_set)}")
    result = train(GinModel(gcfg), train_set, val_set, gcfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint.json", adam=result.adam, rng_state=result.rng_state)
    (out / "history.csv").write_text(result.history_csv())
    print(f"best epoch {result.best_epoch}, validation auc {result.best_val_auc:.4f}")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .evaluation import ExperimentPlan, run_experiment
    from .metrics import accuracy, auc

    manifest, samples = _load_data(cfg["data"])
    out = Path(cfg["out"])
    if cfg["checkpoint"]:
        model = _load_model(cfg["checkpoint"])
        lines = ["location,n,auc,accuracy"]
        for loc in manifest.locations:
            test = [samples[e.id] for e in manifest.entries
                    if e.location == loc and e.split == "test" and e.provenance.value == "Generated"]
            if not test:
                continue
            p = model.predict(test)
            y = [s.label for s in test]
            try:
                a = auc(p, y)
            except ValueError:
                a = float("nan")
            lines.append(f"{loc},{len(test)},{a!r},{accuracy(p, y)!r}")
        text = "\n".join(lines)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text + "\n")
        print(text)
        return EXIT_OK
    try:
        plan = ExperimentPlan(kind=PLAN_NAMES[cfg["plan"]], augmentation=cfg["augmentation"], ks=tuple(cfg["k"]),
                              poolings=tuple(_pooling_name(p) for p in cfg["pooling"]),
                              seeds=tuple(sub_seed(cfg["seed"], f"eval-{s}") for s in cfg["seeds"]),
                              epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                              pfi_repeats=cfg["pfi_repeats"])
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid plan: {exc}", EXIT_VALIDATION) from exc
    report = run_experiment(plan, manifest, samples, progress=log.info)
    report.write(out)
    print("round,k,pooling,seed,auc,accuracy")
    for c in report.cells:
        print(f"{c.round},{c.k},{c.pooling},{c.seed},{c.test_auc:.4f},{c.test_accuracy:.4f}")
    print(f"wrote report to {out}")
    return EXIT_OK


def cmd_pfi(cfg: dict) -> int:
    from .evaluation import pfi_report

    manifest, samples = _load_data(cfg["data"])
    model = _load_model(cfg["checkpoint"])
    test = _split(manifest, samples, cfg["split"])
    rep = pfi_report(model, test, repeats=cfg["repeats"], seed=sub_seed(cfg["seed"], "pfi"))
    text = rep.to_csv().rstrip("\n")
    _emit(text, cfg["out"])
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    from .evaluation import compare_baseline

    manifest, samples = _load_data(cfg["data"])
    model = _load_model(cfg["checkpoint"])
    test = [s for s in _split(manifest, samples, cfg["split"]) if s.grid.n_nodes >= cfg["min_nodes"]]
    test = test[: cfg["limit"]]
    if not test:
        raise CliError(f"no {cfg['split']} grids with at least {cfg['min_nodes']} nodes", EXIT_VALIDATION)
    rep = compare_baseline(test, model, max_deviation=cfg["max_deviation"])
    _emit(rep.table(), cfg["out"])
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "label": cmd_label, "augment": cmd_augment, "train": cmd_train,
    "eval": cmd_eval, "pfi": cmd_pfi, "compare": cmd_compare,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        log.info("resolved config for %s: %s", args.command, json.dumps(cfg, sort_keys=True, default=str))
        # one BLAS thread: reduction order, and so every output byte, must not depend on the machine
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as an exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
