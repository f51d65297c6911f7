"""Command-line harness: ``wsnip gen-data | train | ablate | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import (DatasetSpec, SplitSpec, default_dataset_spec, generate, load_dataset, load_sealed,
                      save_dataset)
from .eip import load_eip_set
from .pipeline import (ABLATIONS, ConfigError, ReportMergeError, RunConfig, ablate_run, report_run, train_run)

log = logging.getLogger("wsnip")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def cmd_gen_data(args) -> int:
    """Config keys: ``seed``, ``m``, ``out``, ``eip_set``, ``dataset`` (a full sampler spec), ``split``."""
    conf = _read_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    out = args.out or conf.get("out")
    if not out:
        raise ConfigError("gen-data needs an output directory (--out or 'out' in the config)")
    if "dataset" in conf:
        spec = DatasetSpec.from_dict({**conf["dataset"], "seed": seed})
    else:
        spec = default_dataset_spec(seed, conf.get("m", 100))
    eips = load_eip_set(conf.get("eip_set"))
    split = SplitSpec(**conf["split"]) if "split" in conf else None
    ds, sealed = generate(spec, eips, split)
    save_dataset(ds, sealed, out)
    print(f"wrote {ds.n} configurations ({ds.m} oracle-labeled) to {out}; manifest {ds.manifest['data_hash']}")
    return 0


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    d = _read_json(args.config)
    if args.out:
        d["out_dir"] = args.out
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if getattr(args, "which", None):
        d["which"] = args.which
    return RunConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    report = train_run(cfg)
    for arm, e in sorted(report["summary"].items()):
        imp = e.get("improvement_pct")
        extra = f"  improvement {imp:+.1f}%" if imp is not None else ""
        print(f"{arm:10s} config MAE {e['mean_config_mae']:.4f} eV  atom MAE {e['mean_atom_mae']:.4f} eV/atom{extra}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if cfg.which is None:
        raise ConfigError(f"ablate needs --which (one of {ABLATIONS})")
    sealed = load_sealed(cfg.data_dir)
    report = ablate_run(cfg, sealed)
    for arm, e in sorted(report["summary"].items()):
        print(f"{arm:22s} config MAE {e['mean_config_mae']:.4f} eV")
    return 0


def cmd_report(args) -> int:
    """Config keys: ``runs`` (list of run directories), ``out``, optional ``data_dir`` for outlier accounting."""
    conf = _read_json(args.config) if args.config else {}
    runs = conf.get("runs") or args.runs
    if not runs:
        raise ConfigError("report needs run directories ('runs' in the config or positional)")
    out = args.out or conf.get("out", "report")
    sealed = n_atoms = None
    if conf.get("data_dir"):
        sealed = load_sealed(conf["data_dir"])
        n_atoms = load_dataset(conf["data_dir"]).n_atoms
    merged = report_run(runs, out, sealed, n_atoms)
    print(f"merged {merged['n_reports']} report(s), {len(merged['runs'])} runs, into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsnip", description="Weakly supervised NN interatomic potentials.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (("gen-data", cmd_gen_data), ("train", cmd_train), ("ablate", cmd_ablate),
                       ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "ablate":
            p.add_argument("--which", choices=ABLATIONS)
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to merge")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportMergeError, FileNotFoundError, ValueError) as exc:
        print(f"wsnip {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
