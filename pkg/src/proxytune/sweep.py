"""Experiment orchestration: config parsing, alpha grids, baseline comparisons.

One *world* per seed: the task's datasets plus the two pretrained frozen
models. A sweep tunes the small model once per (seed, alpha_train) and scores
that single checkpoint at every alpha_test, since the training objective
does not depend on alpha_test.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from . import data as D
from ._fileio import atomic_write
from .errors import ConfigError
from .models import Checkpoint, ModelHandle, Role, build_model
from .proxy import ProxyTriple, proxy_predict
from .trainer import TrainConfig, cpt_tune, finetune_plain, pretrain

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(round(0.2 * k, 10) for k in range(1, 11))


class EmptyDataset(ValueError):
    pass


# -- configuration ---------------------------------------------------------


def train_config(d: Mapping[str, Any] | None, **override) -> TrainConfig:
    d = dict(d or {})
    d.update(override)
    unknown = set(d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _alpha_list(vals, what: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in vals)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of numbers") from None
    if not out:
        raise ConfigError(f"{what} is empty")
    if any(not math.isfinite(a) or a < 0 for a in out):
        raise ConfigError(f"{what} must be finite and >= 0")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ConfigError(f"{what} must be strictly ascending")
    return out


def derive_large(small: Mapping[str, Any]) -> dict:
    """Large stand-in: 4x the hidden width and twice the hidden depth."""
    large = dict(small)
    hidden = list(small.get("hidden", [16]))
    large["hidden"] = [4 * h for h in hidden] * 2
    return large


@dataclass(frozen=True)
class SweepSpec:
    alpha_train: tuple[float, ...] = DEFAULT_ALPHAS
    alpha_test: tuple[float, ...] = DEFAULT_ALPHAS
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset: Mapping[str, Any] = field(default_factory=lambda: {"kind": "blobs_shifted"})
    models: Mapping[str, Any] = field(default_factory=dict)
    train: Mapping[str, Any] = field(default_factory=dict)
    cpt_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha_train", _alpha_list(self.alpha_train, "alpha_train"))
        object.__setattr__(self, "alpha_test", _alpha_list(self.alpha_test, "alpha_test"))
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", seeds)
        if not (math.isfinite(self.cpt_alpha) and self.cpt_alpha >= 0):
            raise ConfigError("cpt alpha must be finite and >= 0")
        train_config(self.train)  # validate early

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "SweepSpec":
        if not isinstance(cfg, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {"dataset", "models", "train", "alphas", "output"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        al = dict(cfg.get("alphas", {}))
        return cls(
            alpha_train=al.get("train", DEFAULT_ALPHAS),
            alpha_test=al.get("test", DEFAULT_ALPHAS),
            seeds=al.get("seeds", (0, 1, 2)),
            dataset=dict(cfg.get("dataset", {"kind": "blobs_shifted"})),
            models=dict(cfg.get("models", {})),
            train=dict(cfg.get("train", {})),
            cpt_alpha=float(al.get("cpt", 1.0)),
        )


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


# -- worlds ------------------------------------------------------------------


def make_datasets(ds: Mapping[str, Any], seed: int):
    """(broad, train, test) for one seed, standardized with broad statistics."""
    ds = dict(ds)
    kind = ds.pop("kind", "blobs_shifted")
    standardize = ds.pop("standardize", True)
    try:
        if kind == "blobs_shifted":
            ds.setdefault("n_classes", 4)
            ds.setdefault("input_dim", 2)
            ds.setdefault("n_per_class", 100)
            ds.setdefault("shift", 3.0)
            broad, train, test = D.gen_blobs_shifted(seed, **ds)
        elif kind in ("moons", "moons_shifted"):
            ds.setdefault("n", 400)
            ds.setdefault("noise", 0.2)
            ds.setdefault("shift", 0.0 if kind == "moons" else 1.0)
            broad, train, test = D.gen_moons_shifted(seed, **ds)
        elif kind == "csv":
            full = D.load_csv(ds["path"], ds["label_column"], ds.get("n_classes"))
            fr = ds.get("fractions", (0.5, 0.25, 0.25))
            broad, train, test = D.split(full, fr, seed, D.SPLITS[:3])
        else:
            raise ConfigError(f"unknown dataset kind {kind!r}")
    except TypeError as e:
        raise ConfigError(f"dataset section: {e}") from e
    except KeyError as e:
        raise ConfigError(f"dataset section: missing {e}") from e
    if standardize:
        st = D.Standardizer.fit(broad)
        broad, train, test = st(broad), st(train), st(test)
    return broad, train, test


def _arch(spec: Mapping[str, Any], input_dim: int, n_classes: int, seed: int) -> dict:
    spec = dict(spec)
    name = spec.pop("name", "mlp")
    hidden = list(spec.pop("hidden", [16]))
    if name == "mlp":
        return {"name": "mlp", "widths": [input_dim, *hidden, n_classes],
                "activation": spec.pop("activation", "tanh"), "seed": seed}
    if name == "dual_encoder":
        return {"name": "dual_encoder", "input_dim": input_dim, "hidden": hidden,
                "embed_dim": spec.pop("embed_dim", 8), "n_classes": n_classes,
                "tau": spec.pop("tau", 1.0), "activation": spec.pop("activation", "tanh"),
                "tunable_classes": spec.pop("tunable_classes", False), "seed": seed}
    raise ConfigError(f"unknown model name {name!r}")


@dataclass
class World:
    seed: int
    broad: D.Dataset
    train: D.Dataset
    test: D.Dataset
    small: Checkpoint
    large: Checkpoint

    def frozen_small(self) -> ModelHandle:
        return ModelHandle.frozen(self.small.to_model(), Role.FROZEN_SMALL)

    def frozen_large(self) -> ModelHandle:
        return ModelHandle.frozen(self.large.to_model(), Role.FROZEN_LARGE)

    def triple(self, tuned: Checkpoint | None = None) -> ProxyTriple:
        """Triple whose tuned model starts from ``tuned`` (default: the pretrained small)."""
        ck = tuned if tuned is not None else self.small
        return ProxyTriple(ck.to_model(), self.frozen_small(), self.frozen_large())


def build_world(spec: SweepSpec, seed: int) -> World:
    broad, train, test = make_datasets(spec.dataset, seed)
    models = dict(spec.models)
    small_spec = models.get("small", {"name": "mlp", "hidden": [16]})
    large_spec = models.get("large") or derive_large(small_spec)
    d, C = broad.input_dim, broad.n_classes
    try:
        small0 = build_model(_arch(small_spec, d, C, seed))
        large0 = build_model(_arch(large_spec, d, C, seed + 7919))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"models section: {e}") from e
    pre = dict(models.get("pretrain", {"epochs": 20, "learning_rate": 1e-2}))
    factor = models.get("large_epochs_factor", 3)
    small_cfg = train_config(pre, seed=seed)
    large_cfg = train_config(pre, seed=seed, epochs=small_cfg.epochs * int(factor))
    return World(seed, broad, train, test,
                 pretrain(small0, broad, small_cfg), pretrain(large0, broad, large_cfg))


# -- evaluation --------------------------------------------------------------


def evaluate(triple: ProxyTriple, dataset: D.Dataset, alpha_test: float,
             offset: np.ndarray | None = None) -> float:
    """Fraction of examples whose ensembled argmax equals the label."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    _, pred = proxy_predict(triple, dataset.X, alpha_test, offset)
    return float(np.mean(pred == dataset.y))


def handle_accuracy(h, dataset: D.Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    return float(np.mean(np.argmax(h(dataset.X), axis=1) == dataset.y))


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepGrid:
    alpha_train: tuple[float, ...]
    alpha_test: tuple[float, ...]
    accuracy: np.ndarray                       # [I, J], nan where no seed succeeded
    n_seeds: np.ndarray                        # [I, J]
    per_seed: np.ndarray = None                # [S, I, J]
    digests: dict = field(default_factory=dict)  # (i, seed) -> tuned checkpoint digest
    metadata: dict = field(default_factory=dict)

    def cell(self, alpha_train: float, alpha_test: float) -> float:
        i = self.alpha_train.index(alpha_train)
        j = self.alpha_test.index(alpha_test)
        return float(self.accuracy[i, j])


def _tune_row(world: World, spec: SweepSpec, i: int):
    """Tune at alpha_train[i] for one world; score at every alpha_test."""
    a = spec.alpha_train[i]
    triple = world.triple()
    cfg = train_config(spec.train, seed=world.seed, alpha_train=a)
    try:
        ck = cpt_tune(triple, world.train, cfg)
    except Exception as e:  # a failed cell is reported, never filled in
        log.warning("seed %d alpha_train %g failed: %s", world.seed, a, e)
        return i, world.seed, None, f"{type(e).__name__}: {e}"
    tuned = triple.with_tuned(ck.to_model())
    off = tuned.offset(world.test.X)
    accs = [evaluate(tuned, world.test, b, off) for b in spec.alpha_test]
    return i, world.seed, (ck.digest(), accs), None


def _tune_row_star(args):
    return _tune_row(*args)


def run_sweep(spec: SweepSpec, workers: int = 1, worlds: Sequence[World] | None = None) -> SweepGrid:
    """Mean proxied test accuracy over seeds for every (alpha_train, alpha_test)."""
    t0 = time.time()
    if worlds is None:
        worlds = [build_world(spec, s) for s in spec.seeds]
    jobs = [(w, spec, i) for w in worlds for i in range(len(spec.alpha_train))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_tune_row_star, jobs))
    else:
        results = [_tune_row_star(j) for j in jobs]
    I, J, S = len(spec.alpha_train), len(spec.alpha_test), len(worlds)
    per_seed = np.full((S, I, J), np.nan)
    seed_pos = {w.seed: k for k, w in enumerate(worlds)}
    digests, failures = {}, []
    for i, seed, ok, err in results:
        if ok is None:
            failures.append({"alpha_train": spec.alpha_train[i], "seed": seed, "error": err})
            continue
        digests[(i, seed)] = ok[0]
        per_seed[seed_pos[seed], i, :] = ok[1]
    n = np.sum(~np.isnan(per_seed), axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(n > 0, np.nansum(per_seed, axis=0) / np.maximum(n, 1), np.nan)
    meta = {
        "dataset": dict(spec.dataset),
        "models": dict(spec.models),
        "seeds": list(spec.seeds),
        "failed_cells": failures,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_s": time.time() - t0,
    }
    return SweepGrid(spec.alpha_train, spec.alpha_test, mean, n, per_seed, digests, meta)


def mean_grid(grids: Sequence[SweepGrid]) -> SweepGrid:
    """Unweighted cell-wise mean of per-task grids sharing both alpha axes.

    A cell missing on any task is missing in the mean.
    """
    if not grids:
        raise ConfigError("no grids to average")
    g0 = grids[0]
    for g in grids[1:]:
        if g.alpha_train != g0.alpha_train or g.alpha_test != g0.alpha_test:
            raise ConfigError("grids must share alpha_train and alpha_test values")
    acc = np.mean([g.accuracy for g in grids], axis=0)
    n = np.min([g.n_seeds for g in grids], axis=0)
    meta = {"tasks": [g.metadata.get("dataset") for g in grids]}
    return SweepGrid(g0.alpha_train, g0.alpha_test, acc, n, metadata=meta)


def diagonal_dominance(grid: SweepGrid, near: float, far: float, tol: float = 1e-9):
    """Compare mean accuracy close to alpha_train == alpha_test against far from it.

    Returns ``(mean_near, mean_far, mean_near > mean_far)``. Missing cells
    are ignored; an empty band is a ConfigError.
    """
    at = np.asarray(grid.alpha_train)[:, None]
    ae = np.asarray(grid.alpha_test)[None, :]
    gap = np.abs(at - ae)
    ok = ~np.isnan(grid.accuracy)
    near_mask = (gap <= near + tol) & ok
    far_mask = (gap >= far - tol) & ok
    if not near_mask.any() or not far_mask.any():
        raise ConfigError(f"empty band (near={near}, far={far})")
    mn, mf = _exact_mean(grid.accuracy[near_mask]), _exact_mean(grid.accuracy[far_mask])
    return mn, mf, mn > mf


def _exact_mean(vals) -> float:
    # exact rational mean, so equal cells give bitwise-equal band means
    return float(sum(map(Fraction, vals.tolist())) / len(vals))


def grid_csv(grid: SweepGrid) -> str:
    buf = io.StringIO()
    buf.write("alpha_train,alpha_test,mean_accuracy,n_seeds\n")
    for i, a in enumerate(grid.alpha_train):
        for j, b in enumerate(grid.alpha_test):
            acc = grid.accuracy[i, j]
            cell = "" if np.isnan(acc) else f"{acc:.6f}"
            buf.write(f"{a:.6f},{b:.6f},{cell},{int(grid.n_seeds[i, j])}\n")
    return buf.getvalue()


def emit_grid_csv(grid: SweepGrid, path) -> None:
    """Write the grid atomically, rows sorted by (alpha_train, alpha_test)."""
    atomic_write(path, grid_csv(grid))


# -- baseline comparison -----------------------------------------------------


@dataclass
class ComparisonEntry:
    name: str
    accuracy: float
    per_seed: list[float]
    provenance: str


@dataclass
class ComparisonReport:
    entries: list[ComparisonEntry]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> ComparisonEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def deltas(self) -> dict[str, float]:
        acc = {e.name: e.accuracy for e in self.entries}
        return {
            "cpt_vs_proxy_tuning": acc["cpt"] - acc["proxy_tuning"],
            "cpt_vs_large_pretrained": acc["cpt"] - acc["large_pretrained"],
            "proxy_tuning_vs_large_pretrained": acc["proxy_tuning"] - acc["large_pretrained"],
            "cpt_vs_small_finetuned": acc["cpt"] - acc["small_finetuned"],
        }

    def to_text(self) -> str:
        w = max(len(e.name) for e in self.entries)
        lines = [f"{'model':<{w}}  accuracy  provenance"]
        for e in self.entries:
            lines.append(f"{e.name:<{w}}  {e.accuracy:8.6f}  {e.provenance}")
        lines.append("")
        for k, v in self.deltas().items():
            lines.append(f"delta {k}: {v:+.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,accuracy,provenance\n")
        for e in self.entries:
            buf.write(f"{e.name},{e.accuracy:.6f},\"{e.provenance}\"\n")
        return buf.getvalue()


def compare(spec: SweepSpec, worlds: Sequence[World] | None = None) -> ComparisonReport:
    """Score the five reference configurations on every seed's test split."""
    if worlds is None:
        worlds = [build_world(spec, s) for s in spec.seeds]
    a = spec.cpt_alpha
    rows: dict[str, list[float]] = {k: [] for k in (
        "small_pretrained", "small_finetuned", "large_pretrained", "proxy_tuning", "cpt")}
    for w in worlds:
        triple = w.triple()
        base = train_config(spec.train, seed=w.seed)
        ft = triple.with_tuned(finetune_plain(triple.tuned.model, w.train, base).to_model())
        cp = triple.with_tuned(cpt_tune(triple, w.train, base.replace(alpha_train=a)).to_model())
        off = triple.offset(w.test.X)
        rows["small_pretrained"].append(handle_accuracy(triple.frozen_small, w.test))
        rows["small_finetuned"].append(evaluate(ft, w.test, 0.0, off))
        rows["large_pretrained"].append(handle_accuracy(triple.frozen_large, w.test))
        rows["proxy_tuning"].append(evaluate(ft, w.test, 1.0, off))
        rows["cpt"].append(evaluate(cp, w.test, a, off))
    prov = {
        "small_pretrained": "frozen small model alone",
        "small_finetuned": "plain fine-tune; alpha_test=0",
        "large_pretrained": "frozen large model alone (zero-shot)",
        "proxy_tuning": "alpha_train=0; alpha_test=1",
        "cpt": f"alpha_train={a:g}; alpha_test={a:g}",
    }
    seeds = ",".join(str(w.seed) for w in worlds)
    entries = [ComparisonEntry(k, float(np.mean(v)), v, f"{prov[k]}; seeds={seeds}")
               for k, v in rows.items()]
    return ComparisonReport(entries, {"dataset": dict(spec.dataset), "seeds": list(spec.seeds)})


def emit_report(report: ComparisonReport, path, csv_path=None) -> None:
    atomic_write(path, report.to_text())
    if csv_path is not None:
        atomic_write(csv_path, report.to_csv())


def spec_with(spec: SweepSpec, **kw) -> SweepSpec:
    d = {k: copy.deepcopy(getattr(spec, k)) for k in SweepSpec.__dataclass_fields__}
    d.update(kw)
    return SweepSpec(**d)
