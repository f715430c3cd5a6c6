"""Training loop, metrics, ablation harness and the attention-cost probe."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import ABLATIONS, TrainConfig
from .data import (Dataset, Normalizer, fit_normalizer, split_bounds, stack_windows, synth_generate,
                   window_starts)
from .model import (LevelPlan, ModelParams, forward, mae_loss, plan_levels, score_entry_count)
from .partition import PartitionHierarchy, build_hierarchy, hierarchy_from_assignments
from .spatial_graph import SpatialGraph, StationSet, build_spatial_graph, epsilon_from_knn
from .spherical_harmonics import build_basis

log = logging.getLogger(__name__)


class TrainingDiverged(nx.NumericalError):
    """Non-finite loss during training; carries the last good parameters."""

    def __init__(self, message: str, params: ModelParams):
        super().__init__(message)
        self.params = params


@dataclass
class Prepared:
    """Everything derived from station metadata before training."""

    epsilon_km: float
    graph: SpatialGraph
    hierarchy: PartitionHierarchy
    plans: list[LevelPlan]
    basis: np.ndarray
    seconds: dict[str, float] = field(default_factory=dict)


def resolve_epsilon(stations: StationSet, cfg: TrainConfig) -> float:
    if cfg.epsilon_km is not None:
        return float(cfg.epsilon_km)
    k, q = cfg.epsilon_knn
    return epsilon_from_knn(stations, int(k), float(q))


def preprocess(stations: StationSet, cfg: TrainConfig) -> Prepared:
    """Graph, nested partitions, SPD tables and harmonic basis."""
    times = {}
    t0 = time.perf_counter()
    eps = resolve_epsilon(stations, cfg)
    graph = build_spatial_graph(stations, eps)
    times["graph"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    method = "random" if "no_metis" in cfg.ablations else "metis"
    hierarchy = build_hierarchy(graph, cfg.p0, cfg.levels, cfg.imbalance, cfg.seed, method)
    times["hierarchy"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    basis = build_basis(stations, cfg.l_max).values
    times["basis"] = time.perf_counter() - t0
    return Prepared(eps, graph, hierarchy, plan_levels(hierarchy, cfg.d_max), basis, times)


def restore_prepared(stations: StationSet, cfg: TrainConfig, epsilon_km: float, assignments) -> Prepared:
    """Preprocessing state for a checkpoint, from its stored radius and level assignments."""
    graph = build_spatial_graph(stations, epsilon_km)
    hierarchy = hierarchy_from_assignments(graph, assignments)
    if [lvl.partition.p for lvl in hierarchy.levels] != [cfg.p0 // 2 ** i for i in range(cfg.levels)]:
        raise ValueError("stored partitions disagree with the checkpoint config")
    basis = build_basis(stations, cfg.l_max).values
    return Prepared(epsilon_km, graph, hierarchy, plan_levels(hierarchy, cfg.d_max), basis)


# --------------------------------------------------------------------------
# metrics


def error_metrics(pred: np.ndarray, target: np.ndarray) -> dict:
    """Per-channel and overall MAE / MSE over arrays shaped ``(..., C)``."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    c = err.shape[-1]
    flat = err.reshape(-1, c)
    return {
        "mae": np.abs(flat).mean(axis=0).tolist(),
        "mse": (flat ** 2).mean(axis=0).tolist(),
        "mae_overall": float(np.abs(flat).mean()),
        "mse_overall": float((flat ** 2).mean()),
    }


@dataclass
class MetricsReport:
    split: str
    model: dict
    persistence: dict
    channel_names: list[str]
    n_windows: int
    score_entries_per_sample: int
    n_params: int = 0
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def mae(self) -> float:
        return self.model["mae_overall"]

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "channels": self.channel_names,
            "n_windows": self.n_windows,
            "model": self.model,
            "persistence": self.persistence,
            "score_entries_per_sample": self.score_entries_per_sample,
            "n_params": self.n_params,
            "train_loss": self.train_loss,
            "val_mae": self.val_mae,
            "best_epoch": self.best_epoch,
        }


def predict_windows(params: ModelParams, prepared: Prepared, z: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Normalised predictions ``(B, N, F, C)`` for every window start."""
    cfg = params.cfg
    out = []
    for i in range(0, len(starts), cfg.eval_batch):
        x, _ = stack_windows(z, starts[i:i + cfg.eval_batch], cfg.t_in, cfg.f_out)
        out.append(forward(params, prepared.plans, prepared.basis, x).value)
    return np.concatenate(out, axis=0)


def evaluate(params: ModelParams, prepared: Prepared, dataset: Dataset, normalizer: Normalizer,
             split: str = "test") -> MetricsReport:
    """Metrics on inverse-normalised predictions, with the persistence forecast alongside."""
    cfg = params.cfg
    span = split_bounds(dataset.t_total, cfg.split)[split]
    starts = window_starts(span, cfg.t_in, cfg.f_out, cfg.stride)
    z = normalizer.apply(dataset.series)
    pred = normalizer.invert(predict_windows(params, prepared, z, starts))
    x, y = stack_windows(dataset.series.astype(np.float64), starts, cfg.t_in, cfg.f_out)
    persist = np.repeat(x[:, :, -1:, :], cfg.f_out, axis=2)
    return MetricsReport(split, error_metrics(pred, y), error_metrics(persist, y), list(dataset.channel_names),
                         len(starts), score_entry_count(prepared.plans, cfg.ablations), params.count())


def _normalised_mae(params, prepared, z, starts) -> float:
    cfg = params.cfg
    pred = predict_windows(params, prepared, z, starts)
    _, y = stack_windows(z, starts, cfg.t_in, cfg.f_out)
    return float(np.abs(pred - y).mean())


# --------------------------------------------------------------------------
# training


def train(cfg: TrainConfig, dataset: Dataset, prepared: Prepared | None = None):
    """Adam on the MAE objective with early stopping on validation MAE.

    Returns ``(params, report, normalizer, prepared)``; ``params`` hold the
    best-on-validation weights and ``report`` covers the test split.
    """
    cfg.validate()
    if prepared is None:
        prepared = preprocess(dataset.stations, cfg)
    normalizer = fit_normalizer(dataset, cfg.split)
    z = normalizer.apply(dataset.series)
    spans = split_bounds(dataset.t_total, cfg.split)
    train_starts = window_starts(spans["train"], cfg.t_in, cfg.f_out, cfg.stride)
    val_starts = window_starts(spans["val"], cfg.t_in, cfg.f_out, cfg.stride)

    rng = np.random.default_rng(cfg.seed)
    params = ModelParams(cfg, dataset.c)
    opt = nx.Adam(params, cfg.lr, (cfg.beta1, cfg.beta2))
    best_val, best_epoch, best_snap = math.inf, -1, params.snapshot()
    wait = 0
    train_curve, val_curve = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_starts)
        if cfg.steps_per_epoch is not None:
            order = order[: cfg.steps_per_epoch * cfg.batch_size]
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            x, y = stack_windows(z, order[i:i + cfg.batch_size], cfg.t_in, cfg.f_out)
            try:
                with nx.Tape() as tape:
                    loss = mae_loss(forward(params, prepared.plans, prepared.basis, x), y)
                nx.backward(tape, loss)
                opt.step()
            except nx.NumericalError as exc:
                params.restore(best_snap)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params) from exc
            finally:
                params.zero_grad()
            losses.append(float(loss.value))
        val = _normalised_mae(params, prepared, z, val_starts)
        train_curve.append(float(np.mean(losses)))
        val_curve.append(val)
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, train_curve[-1], val)
        if val < best_val:
            best_val, best_epoch, best_snap, wait = val, epoch, params.snapshot(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    params.restore(best_snap)
    report = evaluate(params, prepared, dataset, normalizer, "test")
    report.train_loss, report.val_mae, report.best_epoch = train_curve, val_curve, best_epoch
    return params, report, normalizer, prepared


VARIANT_NAMES = {"full": None, "no_metis": "w/o Metis", "no_sh": "w/o SH", "no_intra": "w/o Intra-Att",
                 "no_inter": "w/o Inter-Att", "no_sa": "w/o SA"}


def run_ablations(cfg: TrainConfig, dataset: Dataset, variants=ABLATIONS) -> dict[str, MetricsReport]:
    """Train the full model and each single-component ablation with identical seed and data order."""
    results = {}
    for name in ("full", *variants):
        vcfg = cfg.with_overrides(ablations=[] if name == "full" else [name])
        log.info("training variant %s", name)
        _, report, _, _ = train(vcfg, dataset)
        results[name] = report
    return results


# --------------------------------------------------------------------------
# complexity probe


def analytic_cost(n: int, p: int) -> float:
    """Attention cost per unit width: N^2/P inside subgraphs plus P^2 between them."""
    return n * n / p + p * p


def complexity_probe(n: int, p_grid, levels: int = 1, seed: int = 0, measure: bool = True) -> dict:
    """Analytic cost curve over ``p_grid`` plus score-entry counts from instrumented forwards."""
    p_grid = [int(p) for p in p_grid]
    if any(p < 1 or p > n for p in p_grid):
        raise ValueError("every P must lie in [1, n]")
    rows = []
    if measure:
        ds = synth_generate(n, 8, seed=seed, cap_radius_deg=60.0)
        eps = epsilon_from_knn(ds.stations, 8, 0.9)
        graph = build_spatial_graph(ds.stations, eps)
        basis = build_basis(ds.stations, 1).values
    for p in p_grid:
        row = {"P": p, "analytic_cost": analytic_cost(n, p)}
        if measure and p % (2 ** (levels - 1)) == 0:
            cfg = TrainConfig(d_model=8, levels=levels, p0=p, l_max=1, t_in=4, f_out=1,
                              epsilon_km=eps, imbalance=0.0, seed=seed).validate()
            hierarchy = build_hierarchy(graph, p, levels, 0.0, seed)
            plans = plan_levels(hierarchy, cfg.d_max)
            params = ModelParams(cfg, 1)
            ledger: dict = {}
            x = ds.series[:, :4, :][None].astype(np.float64)
            forward(params, plans, basis, x, ledger=ledger)
            row["measured_entries"] = ledger["score_entries"]
            row["expected_entries"] = score_entry_count(plans)
        rows.append(row)
    best = min(rows, key=lambda r: r["analytic_cost"])["P"]
    return {"n": n, "rows": rows, "argmin_P": best, "optimum_P": n ** (2.0 / 3.0)}
