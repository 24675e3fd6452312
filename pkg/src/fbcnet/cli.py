"""``fbcnet`` command-line entry point.

Every subcommand reads the same JSON run-config (see :mod:`fbcnet.config`),
writes ``resolved_config.json`` and ``seed.txt`` into the output directory and
exits 0 on success. Failures print one line to stderr::

    fbcnet: error code=<name> exit=<n>: <message>
"""
from __future__ import annotations

import argparse
import copy
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as rc
from .data import (DatasetFormatError, EEGDataset, IncompatibleShapes, generate_synthetic,
                   load_dataset, save_dataset)
from .evaluation import run_cv, run_ho
from .filterbank import FilterDesignError, magnitude_db, make_filter_bank
from .interpret import subject_relevance
from .model import ConfigError, FBCNet, build_model
from .trainer import fit

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_MISSING = 3
EXIT_SCHEMA = 4
EXIT_SHAPES = 5
EXIT_DATA = 6

log = logging.getLogger("fbcnet")


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, message: str):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


# shared plumbing -------------------------------------------------------------------

def _prepare(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(rc.dump_config(cfg))
    seeds = {s: rc.derive_seed(cfg["seed"], s) for s in ("init", "shuffle", "synth", "synth-test")}
    (out / "seed.txt").write_text(f"seed={cfg['seed']}\n" +
                                  "".join(f"{k}={v}\n" for k, v in seeds.items()))


def _datasets(cfg: dict) -> tuple[EEGDataset, EEGDataset | None]:
    data = cfg["data"]
    if data["path"]:
        train = load_dataset(data["path"])
        test = load_dataset(data["test_path"]) if data["test_path"] else None
        return train, test
    train = generate_synthetic(rc.synth_config(cfg, "synth"))
    test = generate_synthetic(rc.synth_config(cfg, "synth-test"))
    return train, test


def _evaluate(cfg: dict, train: EEGDataset, test: EEGDataset | None, jobs: int):
    mcfg = rc.model_config(cfg, train)
    plan = rc.train_plan(cfg)
    ev = cfg["eval"]
    if ev["mode"] == "cv":
        return run_cv(train, mcfg, plan, k=ev["k"], jobs=jobs)
    if test is None:
        raise CliError("missing-test-session", EXIT_SCHEMA,
                       "eval.mode 'ho' needs data.test_path (or synthetic data)")
    return run_ho(train, test, mcfg, plan, train_fraction=ev["train_fraction"],
                  val_fraction=ev["val_fraction"])


def _train_model(cfg: dict, train: EEGDataset):
    model = build_model(rc.model_config(cfg, train))
    return fit(model, train, rc.train_plan(cfg), val_fraction=cfg["eval"]["val_fraction"])


# subcommands -------------------------------------------------------------------------

def cmd_synth(cfg, out, args):
    train = generate_synthetic(rc.synth_config(cfg, "synth"))
    save_dataset(train, out / "data")
    save_dataset(generate_synthetic(rc.synth_config(cfg, "synth-test")), out / "data_test")
    print(out / "data")


def cmd_train(cfg, out, args):
    train, _ = _datasets(cfg)
    model, tlog = _train_model(cfg, train)
    model.save(out / "model.ckpt")
    tlog.write_csv(out / "trainlog.csv")
    print(out / "model.ckpt")


def cmd_eval(cfg, out, args, mode):
    cfg = copy.deepcopy(cfg)
    cfg["eval"]["mode"] = mode
    train, test = _datasets(cfg)
    report = _evaluate(cfg, train, test, args.jobs or cfg["jobs"])
    report.write(out / "report.json")
    print(f"mean_accuracy={report.mean_accuracy:.6f} kappa={report.kappa:.6f}")


def cmd_relevance(cfg, out, args):
    train, _ = _datasets(cfg)
    if args.checkpoint:
        model = FBCNet.load(args.checkpoint)
    else:
        model, tlog = _train_model(cfg, train)
        tlog.write_csv(out / "trainlog.csv")
    ip = cfg["interpret"]
    rel = subject_relevance(model, train, ip["reference_class"], ip["target_class"])
    (out / "relevance.txt").write_text(rel.to_text(train.channel_names))
    print(out / "relevance.txt")


def cmd_filter_inspect(cfg, out, args):
    fs = cfg["model"]["sample_rate_hz"] or cfg["data"]["synthetic"]["sample_rate_hz"]
    if cfg["data"]["path"]:
        fs = load_dataset(cfg["data"]["path"]).sample_rate_hz
    mcfg = cfg["model"]
    bank = make_filter_bank(mcfg["bands"], fs, mcfg["transition_hz"], mcfg["stop_atten_db"],
                            mcfg["pass_ripple_db"], mcfg["filter_mode"])
    freqs = np.arange(0.0, fs / 2 + 1e-9, args.step)
    header = ["freq_hz"] + [f"band_{lo:g}_{hi:g}_db" for lo, hi in bank.bands]
    cols = [magnitude_db(f, freqs) for f in bank.filters]
    lines = ["\t".join(header)]
    for i, fr in enumerate(freqs):
        lines.append("\t".join([f"{fr:.4f}"] + [f"{c[i]:.6f}" for c in cols]))
    (out / "filter_response.tsv").write_text("\n".join(lines) + "\n")
    (out / "filter_coefficients.txt").write_text(bank.to_text())
    print(out / "filter_response.tsv")


def _sweep_point(task):
    cfg, point_dir = task
    train, test = _datasets(cfg)
    _prepare(cfg, point_dir)
    report = _evaluate(cfg, train, test, jobs=1)
    report.write(point_dir / "report.json")
    return point_dir.name, report.mean_accuracy


def cmd_sweep(cfg, out, args):
    sw = cfg["sweep"]
    axes = {k: v for k, v in sw.items() if v}
    if not axes:
        raise CliError("empty-sweep", EXIT_SCHEMA, "sweep section lists no values")
    if "train_fraction" in axes and cfg["eval"]["mode"] != "ho":
        raise CliError("sweep-fraction-needs-ho", EXIT_SCHEMA,
                       "sweeping train_fraction requires eval.mode 'ho'")
    names = list(axes)
    tasks = []
    for values in itertools.product(*(axes[n] for n in names)):
        point = copy.deepcopy(cfg)
        point["sweep"] = {k: [] for k in sw}
        for n, v in zip(names, values):
            if n == "train_fraction":
                point["eval"]["train_fraction"] = v
            else:
                point["model"][n] = v
        label = "_".join(f"{n}={v}" for n, v in zip(names, values))
        tasks.append((point, out / label))
    jobs = args.jobs or cfg["jobs"]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = ["point\tmean_accuracy"] + [f"{n}\t{acc:.6f}" for n, acc in results]
    (out / "sweep.tsv").write_text("\n".join(rows) + "\n")
    print(out / "sweep.tsv")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-cv": lambda c, o, a: cmd_eval(c, o, a, "cv"),
    "eval-ho": lambda c, o, a: cmd_eval(c, o, a, "ho"),
    "relevance": cmd_relevance,
    "filter-inspect": cmd_filter_inspect,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="run-config JSON (defaults if omitted)")
        p.add_argument("--out", "-o", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--jobs", "-j", type=int, default=0, help="parallel processes")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "relevance":
            p.add_argument("--checkpoint", help="use a trained checkpoint instead of training")
        if name == "filter-inspect":
            p.add_argument("--step", type=float, default=0.25, help="frequency grid step in Hz")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = rc.load_config(args.config) if args.config else rc.resolve({})
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out:
            cfg["output_dir"] = args.out
        out = Path(cfg["output_dir"])
        _prepare(cfg, out)
        COMMANDS[args.command](cfg, out, args)
    except CliError as exc:
        return _fail(exc.code, exc.exit_code, str(exc))
    except rc.ConfigNotFound as exc:
        return _fail("config-not-found", EXIT_CONFIG_MISSING, str(exc))
    except (rc.SchemaError, ConfigError, FilterDesignError) as exc:
        return _fail("schema", EXIT_SCHEMA, str(exc))
    except IncompatibleShapes as exc:
        return _fail("incompatible-shapes", EXIT_SHAPES, str(exc))
    except DatasetFormatError as exc:
        return _fail("dataset", EXIT_DATA, str(exc))
    except ValueError as exc:
        return _fail("invalid", EXIT_FAILURE, str(exc))
    return EXIT_OK


def _fail(code: str, exit_code: int, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"fbcnet: error code={code} exit={exit_code}: {message}", file=sys.stderr)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
