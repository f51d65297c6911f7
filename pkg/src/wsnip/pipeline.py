"""Experiment orchestration: run configuration, strategies, ablation arms and metrics reports.

Every arm is a pure function of (run configuration, dataset, split, seed),
so arms can be run in any order or in parallel processes with identical
results.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import MANIFEST_FILE, Dataset, load_dataset
from .eip import EipSet, git_blob_hash, load_eip_set
from .models import predict
from .net import save_checkpoint
from .pretrain import PretrainResult, export_representations, finetune, pretrain
from .representation import MessagePassingSpec, RepresentationSpec, featurize_all
from .training import TrainConfig, atom_mae, config_mae
from .weaklabel import (AugmentedSet, DEFAULT_ALPHA, DEFAULT_C, accuracy, assign_classes, class_probabilities,
                        per_atom_errors, select_from_probabilities, train_classifier, train_la,
                        write_augmented_xyz)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "la", "mp", "mp_la")
ABLATIONS = ("label_source", "confidence", "eip_subset", "tukey")
OUTLIER_BOUNDS = (0.1, 0.2, 0.3)
OUTLIER_CATEGORIES = ("inlier", "mild", "normal", "severe")
REPORT_FORMAT = "wsnip-report/1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a training or ablation run.

    ``representation`` holds overrides for :class:`RepresentationSpec`
    (e.g. ``{"message_passing": {"hidden": 64}}``); ``splits`` selects split
    indices (all when ``None``).
    """

    data_dir: str
    out_dir: str = "runs/default"
    eip_set: str | None = None
    strategies: tuple[str, ...] = STRATEGIES
    backend: str = "descriptor"
    alpha: float = DEFAULT_ALPHA
    c: float = DEFAULT_C
    seeds: tuple[int, ...] = (0,)
    splits: tuple[int, ...] | None = None
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    pretrain_epochs: int | None = None
    classifier_epochs: int | None = None
    normalize_pretraining: bool = True
    eip_loss: str = "tukey"
    k_floor: float = 1e-6
    eip_subset: tuple[str, ...] | None = None
    corrupt_fraction: float = 0.0
    corrupt_shift: float = 1.0
    representation: dict = field(default_factory=dict)
    which: str | None = None
    export_pca: bool = True
    save_checkpoints: bool = True

    def __post_init__(self):
        for name in ("strategies", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("splits", "eip_subset"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, tuple(getattr(self, name)))
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"strategies must be a non-empty subset of {STRATEGIES}, got {self.strategies}")
        if self.backend not in ("descriptor", "message_passing"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.alpha < 0 or self.c <= 0:
            raise ConfigError("alpha must be >= 0 and c > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.eip_loss not in ("tukey", "mse"):
            raise ConfigError("eip_loss must be 'tukey' or 'mse'")
        if not 0 <= self.corrupt_fraction <= 1:
            raise ConfigError("corrupt_fraction must lie in [0, 1]")
        if self.which is not None and self.which not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.which!r}; choose from {ABLATIONS}")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run-config keys {unknown}")
        if "data_dir" not in d:
            raise ConfigError("run config needs 'data_dir'")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def train_config(self, epochs: int | None = None, scheduler: str = "linear_decay") -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           lr=self.lr, scheduler=scheduler)

    def representation_spec(self) -> RepresentationSpec:
        over = dict(self.representation)
        base = RepresentationSpec(self.backend, message_passing=MessagePassingSpec(layers=3, hidden=32))
        d = base.to_dict()
        for key, value in over.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        d["backend"] = self.backend
        return RepresentationSpec.from_dict(d)


# --- experiment context -------------------------------------------------------------------

class Experiment:
    """Dataset, features and cached intermediate models shared by the arms of one run."""

    def __init__(self, cfg: RunConfig, ds: Dataset | None = None, eips: EipSet | None = None):
        self.cfg = cfg
        data_dir = Path(cfg.data_dir)
        if ds is None:
            if not (data_dir / MANIFEST_FILE).exists():
                raise ConfigError(f"no dataset at {data_dir}")
            ds = load_dataset(data_dir)
        self.ds = ds
        self.eips = eips if eips is not None else load_eip_set(cfg.eip_set)
        names = list(ds.eip_names)
        subset = list(cfg.eip_subset) if cfg.eip_subset else names
        missing = [n for n in subset if n not in names]
        if missing:
            raise ConfigError(f"EIPs {missing} are not in the dataset's energy table {names}")
        self.eip_names = tuple(subset)
        self.columns = np.array([names.index(n) for n in subset], dtype=np.int64)
        self.table = ds.eip_table[:, self.columns]
        self.n_atoms = ds.n_atoms
        self.pool = ds.pool_index
        needs_pool = any(s != "baseline" for s in cfg.strategies)
        if needs_pool and len(self.pool) == 0:
            raise ConfigError("strategies other than baseline need configurations without oracle labels")
        if not ds.splits:
            raise ConfigError("dataset has no splits")
        self.split_ids = tuple(range(len(ds.splits))) if cfg.splits is None else cfg.splits
        if any(k < 0 or k >= len(ds.splits) for k in self.split_ids):
            raise ConfigError(f"split indices {self.split_ids} out of range")
        self.spec = cfg.representation_spec()
        self._graphs = None
        self._classifiers: dict = {}
        self._pretrained: dict = {}

    @property
    def graphs(self):
        if self._graphs is None:
            self._graphs = featurize_all(self.ds.configs, self.spec)
        return self._graphs

    @property
    def n_eips(self) -> int:
        return len(self.eip_names)

    def split_arrays(self, k: int):
        sp_ = self.ds.splits[k]
        ds = self.ds
        return ({"idx": ds.dft_index[sp_.train], "E": ds.dft_energy[sp_.train]},
                {"idx": ds.dft_index[sp_.val], "E": ds.dft_energy[sp_.val]},
                {"idx": ds.dft_index[sp_.test], "E": ds.dft_energy[sp_.test]})

    def arm_seed(self, k: int, seed: int) -> int:
        return seed * 1000 + k

    def labels(self, idx, energies) -> np.ndarray:
        return assign_classes(per_atom_errors(self.table[idx], energies, self.n_atoms[idx]), self.cfg.c)

    def classifier(self, k: int, seed: int):
        key = (k, seed)
        if key not in self._classifiers:
            tr, va, te = self.split_arrays(k)
            g = self.graphs
            clf, res = train_classifier(
                self.spec, [g[i] for i in tr["idx"]], self.labels(tr["idx"], tr["E"]), self.n_eips + 1,
                [g[i] for i in va["idx"]], self.labels(va["idx"], va["E"]),
                self.cfg.train_config(self.cfg.classifier_epochs, "slanted_triangular"), self.arm_seed(k, seed))
            probs = class_probabilities(clf, [g[i] for i in self.pool])
            test_probs = class_probabilities(clf, [g[i] for i in te["idx"]])
            info = {
                "test_accuracy": accuracy(test_probs, self.labels(te["idx"], te["E"])),
                "best_epoch": res.best_epoch if res else 0,
            }
            self._classifiers[key] = (clf, probs, info)
        return self._classifiers[key]

    def pretrained(self, seed: int) -> PretrainResult:
        if seed not in self._pretrained:
            g = self.graphs
            self._pretrained[seed] = pretrain(
                self.eip_names, [g[i] for i in self.pool], self.table[self.pool], self.spec,
                self.cfg.train_config(self.cfg.pretrain_epochs, "slanted_triangular"), seed * 1000 + 999,
                normalize=self.cfg.normalize_pretraining)
        return self._pretrained[seed]

    def augmented(self, k: int, seed: int, energies: str = "predicted", sealed=None,
                  keep=None) -> AugmentedSet:
        """DFT training set plus classifier-selected pool instances.

        ``energies`` picks the label of each selected instance: the
        predicted EIP's energy, the truly best EIP's energy, or the oracle
        energy (the last two need ``sealed``).
        """
        tr, _, _ = self.split_arrays(k)
        _, probs, _ = self.classifier(k, seed)
        sel = select_from_probabilities(probs, self.table[self.pool])
        aug = AugmentedSet.from_selection(tr["idx"], tr["E"], self.pool, sel, self.n_eips)
        if energies != "predicted":
            if sealed is None:
                raise ConfigError("sealed oracle energies are required for this label source")
            idx = aug.eip_index
            if energies == "true_best":
                errs = per_atom_errors(self.table[idx], sealed[idx], self.n_atoms[idx])
                best = np.argmin(errs, axis=1)
                aug = AugmentedSet(aug.dft_index, aug.dft_energy, idx, best, self.table[idx, best], aug.confidence)
            elif energies == "oracle":
                aug = AugmentedSet(aug.dft_index, aug.dft_energy, idx, aug.eip_source, sealed[idx], aug.confidence)
            else:
                raise ValueError(energies)
        if keep is not None:
            aug = aug.subset_eip(keep)
        if self.cfg.corrupt_fraction > 0 and aug.s:
            rng = np.random.default_rng([seed, k, 40])
            n_bad = int(round(self.cfg.corrupt_fraction * aug.s))
            bad = rng.choice(aug.s, size=n_bad, replace=False)
            energy = aug.eip_energy.copy()
            energy[bad] += self.cfg.corrupt_shift * self.n_atoms[aug.eip_index[bad]]
            aug = AugmentedSet(aug.dft_index, aug.dft_energy, aug.eip_index, aug.eip_source, energy, aug.confidence)
        return aug

    def best_eip_mae(self, k: int) -> float:
        """Test MAE of the best single EIP used directly as the predictor."""
        _, _, te = self.split_arrays(k)
        return float(min(config_mae(self.table[te["idx"], p], te["E"]) for p in range(self.n_eips)))

    # --- arms ---------------------------------------------------------------------------

    def run_arm(self, strategy: str, k: int, seed: int, *, label_source: str = "predicted", sealed=None,
                keep=None, eip_loss: str | None = None, arm: str | None = None, out_dir: Path | None = None) -> dict:
        cfg = self.cfg
        tr, va, te = self.split_arrays(k)
        g = self.graphs
        arm_seed = self.arm_seed(k, seed)
        tc = cfg.train_config()
        eip_loss = eip_loss or cfg.eip_loss
        record = {"arm": arm or strategy, "strategy": strategy, "split": k, "seed": seed}
        init = None
        if strategy in ("mp", "mp_la"):
            init = self.pretrained(seed).rep_arrays
        if strategy in ("la", "mp_la"):
            aug = self.augmented(k, seed, label_source, sealed, keep)
            _, probs, cinfo = self.classifier(k, seed)
            record["classifier"] = cinfo
            record["s"] = aug.s
            record["dropped"] = int(np.sum(np.argmax(probs, axis=1) == self.n_eips))
        else:
            aug = AugmentedSet(tr["idx"], tr["E"], [], [], [], [])
        model, res = train_la(self.spec, g, aug, va["idx"], va["E"], cfg.alpha, tc, arm_seed, eip_loss,
                              cfg.k_floor, init=init, norm_graphs=g)
        pred = predict(model, [g[i] for i in te["idx"]])
        record.update({
            "test_config_mae": config_mae(pred, te["E"]),
            "test_atom_mae": atom_mae(pred, te["E"], self.n_atoms[te["idx"]]),
            "val_config_mae": res.best_score if res.history else float("nan"),
            "best_epoch": res.best_epoch,
            "best_eip_mae": self.best_eip_mae(k),
        })
        trained_on_eip = bool(res.history) and res.history[0].n_eip > 0
        if trained_on_eip:
            record["series"] = {
                "rejection_fraction": [h.rejection_fraction for h in res.history],
                "mean_sigma": [h.mean_sigma for h in res.history],
            }
            record["_usage"] = {
                "eip_index": aug.eip_index,
                "eip_energy": aug.eip_energy,
                "used": np.array([h.used for h in res.history]),
            }
        if out_dir is not None:
            name = f"{record['arm']}_split{k}_seed{seed}"
            if cfg.save_checkpoints:
                (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
                save_checkpoint(out_dir / "checkpoints" / f"{name}.json", model.state_arrays(),
                                meta={"arm": record["arm"], "representation": self.spec.to_dict()})
            if aug.s:
                (out_dir / "augmented").mkdir(parents=True, exist_ok=True)
                (out_dir / "augmented" / f"{name}.xyz").write_text(
                    write_augmented_xyz(self.ds.configs, aug, self.eip_names))
            if trained_on_eip:
                (out_dir / "usage").mkdir(parents=True, exist_ok=True)
                (out_dir / "usage" / f"{name}.json").write_text(json.dumps({
                    "eip_index": aug.eip_index.tolist(),
                    "eip_energy": aug.eip_energy.tolist(),
                    "used": ["".join("1" if u else "0" for u in row) for row in record["_usage"]["used"]],
                }))
        return record


# --- outlier accounting ---------------------------------------------------------------------

def outlier_category(label_energy, oracle_energy, n_atoms) -> np.ndarray:
    """0 inlier, 1 mild, 2 normal, 3 severe, by per-atom label error against 0.1/0.2/0.3 eV/atom."""
    err = np.abs(np.asarray(label_energy) - np.asarray(oracle_energy)) / np.asarray(n_atoms)
    return np.searchsorted(np.array(OUTLIER_BOUNDS), err, side="left")


def usage_by_category(usage: dict, sealed, n_atoms) -> dict[str, list[float]]:
    """Per-epoch fraction of each category's EIP instances whose residual was inside ``k``."""
    idx = np.asarray(usage["eip_index"])
    cat = outlier_category(usage["eip_energy"], np.asarray(sealed)[idx], np.asarray(n_atoms)[idx])
    used = np.asarray(usage["used"], dtype=bool)
    out = {}
    for c, name in enumerate(OUTLIER_CATEGORIES):
        mask = cat == c
        out[name] = [float(row[mask].mean()) if mask.any() else float("nan") for row in used]
        out[f"n_{name}"] = int(mask.sum())
    return out


def load_usage(path) -> dict:
    d = json.loads(Path(path).read_text())
    return {"eip_index": d["eip_index"], "eip_energy": d["eip_energy"],
            "used": [[ch == "1" for ch in row] for row in d["used"]]}


# --- metrics reports -------------------------------------------------------------------------

def provenance_hash(data_dir, eips: EipSet) -> str:
    manifest = (Path(data_dir) / MANIFEST_FILE).read_bytes()
    return git_blob_hash(manifest + eips.to_json().encode())


def _finite_mean(values) -> float:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(records: Sequence[dict], baseline_arm: str = "baseline") -> dict:
    """Per-arm means over splits and seeds plus improvement against the baseline arm."""
    arms: dict[str, list[dict]] = {}
    for r in records:
        arms.setdefault(r["arm"], []).append(r)
    out = {}
    for name, rs in arms.items():
        entry = {
            "strategy": rs[0]["strategy"],
            "n_runs": len(rs),
            "mean_config_mae": float(np.mean([r["test_config_mae"] for r in rs])),
            "std_config_mae": float(np.std([r["test_config_mae"] for r in rs])),
            "mean_atom_mae": float(np.mean([r["test_atom_mae"] for r in rs])),
            "std_atom_mae": float(np.std([r["test_atom_mae"] for r in rs])),
            "mean_best_eip_mae": float(np.mean([r["best_eip_mae"] for r in rs])),
        }
        accs = [r["classifier"]["test_accuracy"] for r in rs if "classifier" in r]
        if accs:
            entry["mean_classifier_accuracy"] = float(np.mean(accs))
        series = [r["series"] for r in rs if "series" in r]
        if series:
            entry["rejection_fraction"] = np.mean([s["rejection_fraction"] for s in series], axis=0).tolist()
            entry["mean_sigma"] = np.mean([s["mean_sigma"] for s in series], axis=0).tolist()
        out[name] = entry
    if baseline_arm in out:
        base = out[baseline_arm]["mean_config_mae"]
        base_atom = out[baseline_arm]["mean_atom_mae"]
        for entry in out.values():
            entry["improvement_pct"] = (base - entry["mean_config_mae"]) / base * 100.0
            entry["atom_improvement_pct"] = (base_atom - entry["mean_atom_mae"]) / base_atom * 100.0
    return out


def _public(record: dict) -> dict:
    return {k: v for k, v in record.items() if not k.startswith("_")}


def make_report(cfg: RunConfig, exp: Experiment, records: Sequence[dict], kind: str, extra: dict | None = None) -> dict:
    report = {
        "format": REPORT_FORMAT,
        "kind": kind,
        "dataset_hash": provenance_hash(cfg.data_dir, exp.eips),
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
        "representation": exp.spec.to_dict(),
        "runs": [_public(r) for r in records],
        "summary": summarize(records),
    }
    if extra:
        report.update(extra)
    return report


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def runs_csv(records: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["arm", "strategy", "split", "seed", "test_config_mae", "test_atom_mae", "val_config_mae", "best_epoch",
            "best_eip_mae", "s"]
    w.writerow(cols)
    for r in records:
        w.writerow([r.get(c, "") for c in cols])
    return buf.getvalue()


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("WSNIP_THREADS", "1")))
    except ValueError:
        return 1


_CTX: dict = {}


def _run_job(job):
    exp = _CTX["exp"]
    strategy, k, seed, kw = job
    return exp.run_arm(strategy, k, seed, **kw)


def run_jobs(exp: Experiment, jobs: list) -> list[dict]:
    """Run ``(strategy, split, seed, kwargs)`` jobs, in worker processes if ``WSNIP_THREADS`` > 1.

    Results come back in job order, so output does not depend on the
    number of workers.
    """
    n = min(thread_count(), len(jobs))
    if n <= 1:
        return [exp.run_arm(s, k, seed, **kw) for s, k, seed, kw in jobs]
    import multiprocessing as mp

    _ = exp.graphs
    # shared cached stages are computed once before forking
    for s, k, seed, kw in jobs:
        if s in ("la", "mp_la"):
            exp.classifier(k, seed)
        if s in ("mp", "mp_la"):
            exp.pretrained(seed)
    _CTX["exp"] = exp
    with mp.get_context("fork").Pool(n) as pool:
        return pool.map(_run_job, jobs)


def train_run(cfg: RunConfig, exp: Experiment | None = None, write: bool = True) -> dict:
    exp = exp or Experiment(cfg)
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(s, k, seed, {"out_dir": out if write else None})
            for seed in cfg.seeds for k in exp.split_ids for s in cfg.strategies]
    records = run_jobs(exp, jobs)
    extra = {}
    if write and cfg.export_pca and any(s in ("mp", "mp_la") for s in cfg.strategies):
        pre = exp.pretrained(cfg.seeds[0])
        (out / "pretrained").mkdir(exist_ok=True)
        from .pretrain import save_pretrained

        save_pretrained(pre, out / "pretrained")
        idx = exp.ds.dft_index
        _, _, text = export_representations(pre.model.rep, [exp.graphs[i] for i in idx], idx.tolist(),
                                            exp.ds.dft_energy / exp.n_atoms[idx])
        (out / "pca.csv").write_text(text)
        extra["pretrain_best_epoch"] = pre.result.best_epoch
    report = make_report(cfg, exp, records, "train", extra)
    if write:
        (out / "metrics.json").write_text(dump_json(report))
        (out / "metrics.csv").write_text(runs_csv(records))
    report["_records"] = records
    return report


# --- ablations -----------------------------------------------------------------------------

def _ablation_jobs(exp: Experiment, which: str, sealed, out) -> list[tuple[Experiment, tuple]]:
    cfg = exp.cfg
    base = {"out_dir": out}
    jobs = []
    for seed in cfg.seeds:
        for k in exp.split_ids:
            jobs.append((exp, ("baseline", k, seed, dict(base))))
            if which == "label_source":
                for source, arm in (("predicted", "predicted"), ("true_best", "true_best"), ("oracle", "dft")):
                    jobs.append((exp, ("la", k, seed, dict(base, label_source=source, sealed=sealed, arm=arm))))
            elif which == "confidence":
                aug = exp.augmented(k, seed)
                from .weaklabel import confidence_groups

                for name, keep in confidence_groups(aug.confidence).items():
                    jobs.append((exp, ("la", k, seed, dict(base, keep=keep, arm=f"confidence_{name}"))))
            elif which == "tukey":
                jobs.append((exp, ("la", k, seed, dict(base, eip_loss="tukey", arm="tukey"))))
                jobs.append((exp, ("la", k, seed, dict(base, eip_loss="mse", arm="mse"))))
            elif which == "eip_subset":
                jobs.append((exp, ("la", k, seed, dict(base, arm="full"))))
                for name in exp.eip_names:
                    sub = exp.subsets[name]
                    jobs.append((sub, ("la", k, seed, dict(base, arm=f"only_{name}"))))
    return jobs


def ablate_run(cfg: RunConfig, sealed, which: str | None = None, exp: Experiment | None = None,
               write: bool = True) -> dict:
    """Run one ablation; ``sealed`` holds the oracle energies of every configuration."""
    which = which or cfg.which
    if which not in ABLATIONS:
        raise ConfigError(f"choose an ablation from {ABLATIONS}")
    if sealed is None:
        raise ConfigError("ablations need the sealed oracle energies")
    cfg = replace(cfg, which=which)
    exp = exp or Experiment(cfg)
    exp.cfg = cfg
    if which == "eip_subset":
        exp.subsets = {}
        for name in exp.eip_names:
            sub = Experiment(replace(cfg, eip_subset=(name,)), ds=exp.ds, eips=exp.eips)
            sub._graphs = exp.graphs
            exp.subsets[name] = sub
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    jobs = _ablation_jobs(exp, which, sealed, out if write else None)
    records = []
    for owner, job in jobs:
        strategy, k, seed, kw = job
        records.append(owner.run_arm(strategy, k, seed, **kw))
    for r in records:
        if "_usage" in r:
            r["outlier_usage"] = usage_by_category(r["_usage"], sealed, exp.n_atoms)
    report = make_report(cfg, exp, records, f"ablate:{which}")
    report["outlier_usage"] = _mean_outlier_usage(records)
    if write:
        (out / "metrics.json").write_text(dump_json(report))
        (out / "metrics.csv").write_text(runs_csv(records))
        (out / "comparison.csv").write_text(comparison_csv(report["summary"]))
    report["_records"] = records
    return report


def _mean_outlier_usage(records) -> dict:
    by_arm: dict[str, list] = {}
    for r in records:
        if "outlier_usage" in r:
            by_arm.setdefault(r["arm"], []).append(r["outlier_usage"])
    out = {}
    for arm, rows in by_arm.items():
        out[arm] = {c: np.nanmean([row[c] for row in rows], axis=0).tolist()
                    for c in OUTLIER_CATEGORIES if all(row[f"n_{c}"] for row in rows)}
    return out


def comparison_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "n_runs", "mean_config_mae", "std_config_mae", "mean_atom_mae", "std_atom_mae",
                "improvement_pct"])
    for arm in sorted(summary):
        e = summary[arm]
        w.writerow([arm, e["n_runs"], e["mean_config_mae"], e["std_config_mae"], e["mean_atom_mae"],
                    e["std_atom_mae"], e.get("improvement_pct", "")])
    return buf.getvalue()


# --- report merging -------------------------------------------------------------------------

class ReportMergeError(ValueError):
    pass


def merge_reports(reports: Sequence[dict]) -> dict:
    """Pool the runs of several reports; they must share one dataset hash."""
    if not reports:
        raise ReportMergeError("nothing to merge")
    hashes = {r["dataset_hash"] for r in reports}
    if len(hashes) != 1:
        raise ReportMergeError(f"reports come from different datasets: {sorted(hashes)}")
    runs = [run for r in reports for run in r["runs"]]
    return {"format": REPORT_FORMAT, "kind": "merged", "dataset_hash": hashes.pop(), "n_reports": len(reports),
            "runs": runs, "summary": summarize(runs)}


def series_csv(runs: Sequence[dict], key: str) -> str:
    """One row per epoch; ``<arm>_mean`` and ``<arm>_std`` columns over all runs of that arm."""
    by_arm: dict[str, list] = {}
    for r in runs:
        if "series" in r:
            by_arm.setdefault(r["arm"], []).append(r["series"][key])
    arms = sorted(by_arm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch"] + [f"{a}_{stat}" for a in arms for stat in ("mean", "std")])
    n_epochs = max((len(s) for v in by_arm.values() for s in v), default=0)
    stats = {a: (np.mean(by_arm[a], axis=0), np.std(by_arm[a], axis=0)) for a in arms}
    for e in range(n_epochs):
        row = [e + 1]
        for a in arms:
            row += [float(stats[a][0][e]), float(stats[a][1][e])]
        w.writerow(row)
    return buf.getvalue()


def outlier_csv(runs: Sequence[dict]) -> str:
    """Per-epoch used fraction for each outlier category, averaged over runs of each arm."""
    usage = _mean_outlier_usage(runs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [(a, c) for a in sorted(usage) for c in usage[a]]
    w.writerow(["epoch"] + [f"{a}_{c}_used" for a, c in cols])
    n = max((len(usage[a][c]) for a, c in cols), default=0)
    for e in range(n):
        w.writerow([e + 1] + [usage[a][c][e] for a, c in cols])
    return buf.getvalue()


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "strategy", "n_runs", "mean_config_mae", "std_config_mae", "mean_atom_mae", "std_atom_mae",
                "improvement_pct", "mean_best_eip_mae", "mean_classifier_accuracy"])
    for arm in sorted(summary):
        e = summary[arm]
        w.writerow([arm, e["strategy"], e["n_runs"], e["mean_config_mae"], e["std_config_mae"], e["mean_atom_mae"],
                    e["std_atom_mae"], e.get("improvement_pct", ""), e["mean_best_eip_mae"],
                    e.get("mean_classifier_accuracy", "")])
    return buf.getvalue()


def report_run(run_dirs: Sequence, out_dir, sealed=None, n_atoms=None) -> dict:
    """Merge ``metrics.json`` files and write summary, series, outlier and PCA CSVs."""
    reports = []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise ReportMergeError(f"{path} not found")
        reports.append(json.loads(path.read_text()))
    merged = merge_reports(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if sealed is not None:
        for d in run_dirs:
            for r in json.loads((Path(d) / "metrics.json").read_text())["runs"]:
                p = Path(d) / "usage" / f"{r['arm']}_split{r['split']}_seed{r['seed']}.json"
                if p.exists():
                    for m in merged["runs"]:
                        if (m["arm"], m["split"], m["seed"]) == (r["arm"], r["split"], r["seed"]):
                            m["outlier_usage"] = usage_by_category(load_usage(p), sealed, n_atoms)
        (out / "outliers.csv").write_text(outlier_csv(merged["runs"]))
    (out / "summary.csv").write_text(summary_csv(merged["summary"]))
    (out / "rejection.csv").write_text(series_csv(merged["runs"], "rejection_fraction"))
    (out / "sigma.csv").write_text(series_csv(merged["runs"], "mean_sigma"))
    pcas = [Path(d) / "pca.csv" for d in run_dirs if (Path(d) / "pca.csv").exists()]
    if pcas:
        lines = pcas[0].read_text().splitlines()
        header, rows = "run," + lines[0], []
        for k, p in enumerate(pcas):
            rows += [f"{k}," + line for line in p.read_text().splitlines()[1:]]
        (out / "pca.csv").write_text("\n".join([header] + rows) + "\n")
    (out / "report.json").write_text(dump_json(merged))
    return merged
