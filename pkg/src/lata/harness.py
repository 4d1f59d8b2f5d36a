"""Experiment orchestration: windows, K-shot sampling, trials, and controls.

A trial processes its test pool through fixed-size windows: every window is
the full calibration split plus the next W - n test items (the last batch may
be smaller). Within one window the pipeline

    zero-shot probs -> optional prior -> optional top-kappa truncation ->
    graph build -> refinement -> failure signals -> failure-aware scores ->
    per-window calibration -> prediction sets

is applied to the joint pool, so calibration scores use the same refined
probabilities as the test scores and the threshold is recomputed per window.

Seeding: trial t of a run uses numpy's default_rng seeded with
[base_seed, t], so any trial is reproducible in isolation and results are
independent of how trials are scheduled across workers. Synthetic runs redraw
the whole pool each trial (calibration/test split by uniform shuffle); file
datasets keep their test split fixed and resample only the K-shot calibration
subset.

Reported wall times are measured and therefore not reproducible bit-for-bit;
they are kept out of the deterministic report payload (see `ExperimentResult`)
and emitted separately. Peak memory figures are deterministic analytic
estimates of the largest transient array footprint.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .conformal import (ConformalThreshold, base_score_matrix, calibrate,
                        prediction_set_from_mask, score_failure_aware)
from .core import LabeledExample, PrototypeBank, normalize_rows, zero_shot_prob_matrix
from .dataio import RunConfig, load_dataset, load_vilu_bundle
from .errors import ConfigError, DataError
from .graph import build_graph
from .metrics import ConformalReport, EvaluationRecord, build_report
from .refine import apply_prior, estimate_prior, refine, restore_topk, truncate_topk
from .signals import HeuristicProvider, OracleProvider, ViluProvider
from .synthetic import SyntheticDataset, SyntheticSpec, generate_synthetic

ABLATION_PARAMS = {
    "gamma": "gamma",
    "k": "k",
    "t_iter": "t_iter",
    "beta": "beta",
    "lambda": "lam",
    "eta": "eta",
    "tau": "tau",
    "W": "window",
    "K": "shots",
    "kappa": "kappa",
    "gate_threshold": "gate_threshold",
}

_INT_PARAMS = {"k", "t_iter", "W", "K", "kappa"}


@dataclass(frozen=True)
class WindowPlan:
    """Calibration indices plus the partition of test indices into batches."""

    window_size: int
    cal_indices: np.ndarray
    test_batches: tuple[np.ndarray, ...]


def plan_windows(n_cal: int, n_test: int, window_size: int) -> WindowPlan:
    """Partition test indices into chunks of size window_size - n_cal."""
    if n_cal < 1:
        raise ConfigError("need at least one calibration item")
    if n_test < 0:
        raise ConfigError("n_test must be nonnegative")
    if n_cal >= window_size:
        raise ConfigError(
            f"window W={window_size} must exceed the calibration size n={n_cal}; raise W")
    batch = window_size - n_cal
    batches = tuple(np.arange(start, min(start + batch, n_test), dtype=np.int64)
                    for start in range(0, n_test, batch))
    return WindowPlan(window_size, np.arange(n_cal, dtype=np.int64), batches)


def largest_remainder_counts(marginals, total: int) -> np.ndarray:
    """Integer class quotas summing to `total`, rounding by largest remainder.

    Ties in the fractional part go to the lower class index.
    """
    m = np.asarray(marginals, dtype=np.float64)
    if m.ndim != 1 or m.size == 0 or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must be a simplex point")
    if total < 0:
        raise ValueError("total must be nonnegative")
    quotas = m * total
    base = np.floor(quotas).astype(np.int64)
    deficit = total - int(base.sum())
    frac = quotas - base
    order = np.lexsort((np.arange(m.size), -frac))
    base[order[:deficit]] += 1
    return base


def kshot_indices(labels, n_cal: int, marginals, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw a marginal-matched calibration subset; returns (cal_idx, rest_idx).

    Per class c the draw takes largest-remainder-rounded n_cal * m_c items
    without replacement; the remainder preserves pool order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = largest_remainder_counts(marginals, n_cal)
    chosen = []
    for c, want in enumerate(counts):
        if want == 0:
            continue
        pool_c = np.flatnonzero(labels == c)
        if pool_c.size < want:
            raise DataError(
                f"class {c} has {pool_c.size} pool items but the split needs {int(want)}")
        chosen.append(rng.choice(pool_c, size=int(want), replace=False))
    cal_idx = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    rest_mask = np.ones(labels.size, dtype=bool)
    rest_mask[cal_idx] = False
    return cal_idx, np.flatnonzero(rest_mask)


def sample_kshot(pool, shots: int, target_marginals, seed) -> tuple[list, list]:
    """K-shot split of a LabeledExample pool: n_cal = C * shots items.

    `seed` may be an int or a numpy Generator; the draw is deterministic
    under it.
    """
    pool = list(pool)
    if any(ex.label is None for ex in pool):
        raise DataError("K-shot sampling needs a fully labeled pool")
    labels = np.array([ex.label for ex in pool], dtype=np.int64)
    m = np.asarray(target_marginals, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cal_idx, rest_idx = kshot_indices(labels, int(shots * m.size), m, rng)
    return [pool[i] for i in cal_idx], [pool[i] for i in rest_idx]


def make_provider(config: RunConfig):
    """Instantiate the configured failure-signal provider."""
    if config.provider == "heuristic":
        return HeuristicProvider()
    if config.provider == "oracle":
        return OracleProvider()
    if config.provider == "vilu":
        if not config.vilu_bundle:
            raise ConfigError("provider 'vilu' needs a vilu_bundle path")
        return ViluProvider(load_vilu_bundle(config.vilu_bundle))
    raise ConfigError(f"unknown provider {config.provider!r}")


@dataclass
class ScoredPool:
    """One window's joint pool after the deterministic transform."""

    embeddings: np.ndarray
    probs_zero_shot: np.ndarray
    probs_input: np.ndarray       # after the optional prior bias
    probs_refined: np.ndarray
    u: np.ndarray
    attention: np.ndarray
    is_cal: np.ndarray            # True for calibration rows
    trace: object | None


@dataclass
class WindowResult:
    records: list[EvaluationRecord]
    sets: list
    threshold: ConformalThreshold
    pool: ScoredPool
    mem_bytes: int


def _window_mem_estimate(n_pool: int, n_classes: int, dim: int,
                         max_deg: int, refined: bool) -> int:
    f8 = 8
    resident = n_pool * dim * f8 + 5 * n_pool * n_classes * f8
    if not refined:
        return int(resident)
    build_phase = 2 * n_pool * n_pool * f8
    agg_phase = 2 * n_pool * max_deg * n_classes * f8 + 2 * n_pool * max_deg * 2 * f8
    return int(resident + max(build_phase, agg_phase))


def run_window(cal_embeddings, cal_labels, test_embeddings, test_labels,
               bank: PrototypeBank, config: RunConfig, provider,
               rng: np.random.Generator | None = None) -> WindowResult:
    """Run the full pipeline on one joint window and calibrate inside it.

    `test_labels` may be None (prediction sets are still produced; evaluation
    records are only built when labels exist). With a randomized score rule an
    rng is required: one uniform draw per pool item per window, shared across
    that item's candidate labels.
    """
    cal_emb = np.asarray(cal_embeddings, dtype=np.float64)
    test_emb = np.asarray(test_embeddings, dtype=np.float64)
    cal_labels = np.asarray(cal_labels, dtype=np.int64)
    n, m = cal_emb.shape[0], test_emb.shape[0]
    if n + m > config.window:
        raise ConfigError(f"window pool {n + m} exceeds W={config.window}; raise W")
    if cal_labels.shape != (n,):
        raise DataError("calibration labels must cover the calibration split")
    pool_emb = np.vstack([cal_emb, test_emb]) if m else cal_emb
    n_classes = bank.n_classes

    Q0 = zero_shot_prob_matrix(pool_emb, bank, config.tau)
    if config.beta > 0:
        prior = estimate_prior(cal_labels, n_classes, config.pseudo_count)
        Q = apply_prior(Q0, prior, config.beta)
    else:
        Q = Q0

    pool_labels = None
    if test_labels is not None:
        test_labels = np.asarray(test_labels, dtype=np.int64)
        pool_labels = np.concatenate([cal_labels, test_labels])
    elif config.provider == "oracle":
        raise DataError("oracle provider needs labels for the whole pool")
    u_vec, attention = provider.compute(
        pool_emb, Q, bank, labels=pool_labels if config.provider == "oracle" else None)

    trace = None
    max_deg = 0
    refined = config.gamma > 0 and config.t_iter > 0
    if refined:
        kappa_eff = n_classes if config.kappa is None else min(config.kappa, n_classes)
        if kappa_eff < n_classes:
            Q_in, mask = truncate_topk(Q, kappa_eff)
        else:
            Q_in, mask = Q, None
        graph = build_graph(pool_emb, config.k)
        max_deg = graph.nbr_idx.shape[1]
        Z, trace = refine(Q_in, graph, config.refine_config(),
                          u=u_vec if config.gate_threshold is not None else None,
                          record_objective=False)
        if mask is not None:
            Z = restore_topk(Z, mask, Q)
    else:
        Z = Q

    rule = config.score_rule()
    u_rand = None
    if rule.randomize:
        if rng is None:
            raise ConfigError("randomized scoring needs a seeded generator")
        u_rand = rng.uniform(size=n + m)
    base = base_score_matrix(Z, rule, u=u_rand)
    params = config.failure_params()
    starred = score_failure_aware(base, u_vec[:, None], attention, params)

    cal_scores = starred[np.arange(n), cal_labels]
    threshold = calibrate(cal_scores, config.alpha)
    test_mask = starred[n:] <= threshold.s_hat
    sets = [prediction_set_from_mask(row) for row in test_mask]
    points = np.argmax(Z[n:], axis=1) if m else np.empty(0, dtype=np.int64)
    records = []
    if test_labels is not None:
        records = [EvaluationRecord(int(y), s, int(p))
                   for y, s, p in zip(test_labels, sets, points)]
    pool = ScoredPool(pool_emb, Q0, Q, Z, u_vec, attention,
                      np.arange(n + m) < n, trace)
    mem = _window_mem_estimate(n + m, n_classes, pool_emb.shape[1], max_deg, refined)
    return WindowResult(records, sets, threshold, pool, mem)


@dataclass
class TrialResult:
    report: ConformalReport
    thresholds: list[ConformalThreshold]


def run_trial(cal_embeddings, cal_labels, test_embeddings, test_labels,
              bank: PrototypeBank, config: RunConfig, provider,
              rng: np.random.Generator | None = None) -> TrialResult:
    """Slide the window over the whole test pool and report trial metrics."""
    if test_labels is None:
        raise DataError("metric reports need labeled test items")
    t0 = time.perf_counter()
    plan = plan_windows(len(cal_labels), len(test_labels), config.window)
    records: list[EvaluationRecord] = []
    thresholds = []
    peak_mem = 0
    for batch in plan.test_batches:
        wr = run_window(cal_embeddings, cal_labels,
                        test_embeddings[batch], np.asarray(test_labels)[batch],
                        bank, config, provider, rng=rng)
        records.extend(wr.records)
        thresholds.append(wr.threshold)
        peak_mem = max(peak_mem, wr.mem_bytes)
    wall = time.perf_counter() - t0
    report = build_report(records, config.alpha, bank.n_classes,
                          wall_time_s=wall, peak_mem_estimate=peak_mem)
    return TrialResult(report, thresholds)


def trial_rng(base_seed: int, trial: int) -> np.random.Generator:
    """The documented per-trial stream: default_rng seeded with [base_seed, trial]."""
    return np.random.default_rng([base_seed, trial])


def _synthetic_spec_from_config(config: RunConfig) -> SyntheticSpec:
    data = dict(config.data)
    data.pop("kind", None)
    data.pop("seed", None)  # per-trial seeding comes from the run, not the spec
    if "mixture_weights" in data and data["mixture_weights"] is not None:
        data["mixture_weights"] = tuple(data["mixture_weights"])
    try:
        return SyntheticSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic data spec: {exc}") from exc


def _files_pack(config: RunConfig):
    cal_pool, test_pool, bank = load_dataset(config.data["manifest"])
    if any(ex.label is None for ex in test_pool):
        raise DataError("experiment runs need labeled test items")
    if not test_pool:
        raise DataError("dataset has no test records")
    cal_emb = np.stack([ex.embedding for ex in cal_pool])
    cal_labels = np.array([ex.label for ex in cal_pool], dtype=np.int64)
    test_emb = np.stack([ex.embedding for ex in test_pool])
    test_labels = np.array([ex.label for ex in test_pool], dtype=np.int64)
    counts = np.bincount(cal_labels, minlength=bank.n_classes).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("every class needs at least one calibration-pool item")
    marginals = counts / counts.sum()
    return cal_emb, cal_labels, test_emb, test_labels, bank, marginals


def _trial_dataset(config: RunConfig, pack, trial: int, stratify_cal: bool = False):
    """Materialize trial data and its generator, per the seeding scheme.

    `stratify_cal` re-partitions a synthetic pool with the K-shot sampler
    (marginal-matched per-class counts) instead of the uniform shuffle; the
    control experiment needs this so its probe sees every class.
    """
    rng = trial_rng(config.base_seed, trial)
    if pack[0] == "synthetic":
        spec = pack[1]
        ds = generate_synthetic(spec, rng=rng)
        if stratify_cal:
            emb = np.vstack([ds.cal_embeddings, ds.test_embeddings])
            labels = np.concatenate([ds.cal_labels, ds.test_labels])
            weights = spec.mixture_weights
            marginals = (np.full(spec.n_classes, 1.0 / spec.n_classes)
                         if weights is None else np.asarray(weights, dtype=np.float64))
            cal_idx, rest_idx = kshot_indices(labels, spec.n_cal, marginals, rng)
            ds = SyntheticDataset(emb[cal_idx], labels[cal_idx],
                                  emb[rest_idx], labels[rest_idx], ds.bank)
        return ds, rng
    cal_emb, cal_labels, test_emb, test_labels, bank, marginals = pack[1]
    n_cal = bank.n_classes * config.shots
    cal_idx, _ = kshot_indices(cal_labels, n_cal, marginals, rng)
    ds = SyntheticDataset(cal_emb[cal_idx], cal_labels[cal_idx],
                          test_emb, test_labels, bank)
    return ds, rng


def _run_one_trial(config: RunConfig, provider, pack, trial: int) -> TrialResult:
    try:
        ds, rng = _trial_dataset(config, pack, trial)
        return run_trial(ds.cal_embeddings, ds.cal_labels,
                         ds.test_embeddings, ds.test_labels,
                         ds.bank, config, provider, rng=rng)
    except Exception as exc:
        raise type(exc)(f"trial {trial} aborted: {exc}") from exc


@dataclass
class ExperimentResult:
    """All trials of one configuration plus deterministic aggregates."""

    config: RunConfig
    reports: list[ConformalReport]
    thresholds: list[list[ConformalThreshold]] = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for name in ("coverage", "mean_size", "ccv", "aca"):
            vals = np.array([getattr(r, name) for r in self.reports], dtype=np.float64)
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out[name] = {"mean": float(vals.mean()), "std": std}
        return out

    def to_report_dict(self) -> dict:
        """Deterministic payload: bitwise identical for a (config, seed) pair."""
        per_trial = []
        for t, rep in enumerate(self.reports):
            entry = {"trial": t, **rep.metrics_dict()}
            if self.thresholds:
                entry["window_thresholds"] = [th.to_json_dict() for th in self.thresholds[t]]
            per_trial.append(entry)
        return {
            "schema": "lata-report-v1",
            "config": self.config.to_dict(),
            "n_trials": len(self.reports),
            "aggregate": self.aggregate(),
            "per_trial": per_trial,
        }

    def timing_dict(self) -> dict:
        walls = [r.wall_time_s for r in self.reports]
        total_images = sum(r.n_test for r in self.reports)
        total = float(np.sum(walls)) if walls else 0.0
        return {
            "wall_time_s_per_trial": walls,
            "total_wall_time_s": total,
            "mean_wall_time_s": total / len(walls) if walls else 0.0,
            "mean_time_per_image_s": total / total_images if total_images else 0.0,
        }

    def frontier_rows(self) -> list[dict]:
        """Per-trial coverage/size points for frontier plots."""
        return [{"trial": t, "coverage": r.coverage, "mean_size": r.mean_size,
                 "ccv": r.ccv, "aca": r.aca} for t, r in enumerate(self.reports)]


def _data_pack(config: RunConfig):
    if config.data is None:
        raise ConfigError("no data source configured (set data.kind = files|synthetic)")
    if config.data["kind"] == "synthetic":
        return ("synthetic", _synthetic_spec_from_config(config))
    return ("files", _files_pack(config))


def run_experiment(config: RunConfig) -> ExperimentResult:
    """Run `config.trials` seeded trials and collect their reports.

    Trials are independent and may run in parallel (config.workers); results
    are aggregated in trial order, so reports do not depend on the worker
    count. A failing trial aborts the run with the trial index in the error.
    """
    config.validate()
    pack = _data_pack(config)
    provider = make_provider(config)
    trials = range(config.trials)
    if config.workers > 1:
        results = Parallel(n_jobs=config.workers)(
            delayed(_run_one_trial)(config, provider, pack, t) for t in trials)
    else:
        results = [_run_one_trial(config, provider, pack, t) for t in trials]
    return ExperimentResult(config,
                            [tr.report for tr in results],
                            [tr.thresholds for tr in results])


def fit_mean_probe(cal_embeddings, cal_labels, n_classes: int) -> np.ndarray:
    """Per-class mean of calibration embeddings, re-normalized; (C, D)."""
    emb = np.asarray(cal_embeddings, dtype=np.float64)
    labels = np.asarray(cal_labels, dtype=np.int64)
    means = []
    for c in range(n_classes):
        rows = emb[labels == c]
        if rows.size == 0:
            raise DataError(f"class {c} absent from calibration; probe undefined")
        means.append(rows.mean(axis=0))
    return normalize_rows(np.stack(means))


def double_dip_control(cal_embeddings, cal_labels, test_embeddings, test_labels,
                       bank: PrototypeBank, config: RunConfig,
                       rng: np.random.Generator | None = None) -> ConformalReport:
    """The illegal baseline: fit a nearest-class-mean probe on the calibration
    embeddings, swap it in as the prototype bank, then calibrate split
    conformal on that SAME calibration split.

    Adapting and conformalizing on one split couples the calibration scores
    to the fitted probe, so coverage on exchangeable data generally falls
    below the nominal target; this runner exists to demonstrate that.
    """
    cal_emb = np.asarray(cal_embeddings, dtype=np.float64)
    cal_labels = np.asarray(cal_labels, dtype=np.int64)
    test_emb = np.asarray(test_embeddings, dtype=np.float64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    probe_bank = PrototypeBank(fit_mean_probe(cal_emb, cal_labels, bank.n_classes),
                               bank.class_names)
    q_cal = zero_shot_prob_matrix(cal_emb, probe_bank, config.tau)
    q_test = zero_shot_prob_matrix(test_emb, probe_bank, config.tau)
    rule = config.score_rule()
    u_cal = u_test = None
    if rule.randomize:
        if rng is None:
            raise ConfigError("randomized scoring needs a seeded generator")
        u_cal = rng.uniform(size=cal_emb.shape[0])
        u_test = rng.uniform(size=test_emb.shape[0])
    cal_scores = base_score_matrix(q_cal, rule, u=u_cal)[np.arange(cal_emb.shape[0]), cal_labels]
    threshold = calibrate(cal_scores, config.alpha)
    test_scores = base_score_matrix(q_test, rule, u=u_test)
    sets = [prediction_set_from_mask(row <= threshold.s_hat) for row in test_scores]
    points = np.argmax(q_test, axis=1)
    records = [EvaluationRecord(int(y), s, int(p))
               for y, s, p in zip(test_labels, sets, points)]
    return build_report(records, config.alpha, bank.n_classes)


@dataclass
class ControlResult:
    """Double-dip negative control vs. the legal pipeline on identical trials."""

    config: RunConfig
    illegal: ExperimentResult
    legal: ExperimentResult

    def to_report_dict(self) -> dict:
        return {
            "schema": "lata-control-v1",
            "config": self.config.to_dict(),
            "illegal_probe_scp_same_split": {
                "aggregate": self.illegal.aggregate(),
                "per_trial": [r.metrics_dict() for r in self.illegal.reports],
            },
            "legal_refined_pipeline": {
                "aggregate": self.legal.aggregate(),
                "per_trial": [r.metrics_dict() for r in self.legal.reports],
            },
        }


def _run_one_control_trial(config: RunConfig, provider, pack, trial: int):
    try:
        ds, rng = _trial_dataset(config, pack, trial, stratify_cal=True)
        illegal = double_dip_control(ds.cal_embeddings, ds.cal_labels,
                                     ds.test_embeddings, ds.test_labels,
                                     ds.bank, config, rng=rng)
        legal = run_trial(ds.cal_embeddings, ds.cal_labels,
                          ds.test_embeddings, ds.test_labels,
                          ds.bank, config, provider, rng=rng)
        return illegal, legal.report
    except Exception as exc:
        raise type(exc)(f"control trial {trial} aborted: {exc}") from exc


def run_control_experiment(config: RunConfig) -> ControlResult:
    """Per trial: one shared dataset, the illegal probe baseline, the legal run."""
    config.validate()
    pack = _data_pack(config)
    provider = make_provider(config)
    trials = range(config.trials)
    if config.workers > 1:
        pairs = Parallel(n_jobs=config.workers)(
            delayed(_run_one_control_trial)(config, provider, pack, t) for t in trials)
    else:
        pairs = [_run_one_control_trial(config, provider, pack, t) for t in trials]
    illegal = ExperimentResult(config, [p[0] for p in pairs])
    legal = ExperimentResult(config, [p[1] for p in pairs])
    return ControlResult(config, illegal, legal)


def parse_ablation_value(param: str, token: str):
    if param not in ABLATION_PARAMS:
        raise ConfigError(f"unknown ablation parameter {param!r}; "
                          f"choose from {sorted(ABLATION_PARAMS)}")
    token = token.strip()
    if param == "gate_threshold" and token.lower() == "none":
        return None
    try:
        return int(token) if param in _INT_PARAMS else float(token)
    except ValueError as exc:
        raise ConfigError(f"bad value {token!r} for parameter {param}") from exc


def run_ablation(config: RunConfig, param: str, values) -> list[tuple[object, ExperimentResult]]:
    """Sweep one public parameter, re-running the experiment per value."""
    if param not in ABLATION_PARAMS:
        raise ConfigError(f"unknown ablation parameter {param!r}; "
                          f"choose from {sorted(ABLATION_PARAMS)}")
    field_name = ABLATION_PARAMS[param]
    out = []
    for value in values:
        cfg = dataclasses.replace(config, **{field_name: value})
        out.append((value, run_experiment(cfg)))
    return out


def time_window_compute(config: RunConfig, n_pool: int, n_classes: int,
                        dim: int = 32, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time of refinement + scoring for one prepared window.

    The pool, its graph, and the provider signals are built once outside the
    timed region; the measurement covers the refinement iterations, the
    failure-aware score matrix, calibration, and set construction.
    """
    spec = SyntheticSpec(n_classes=n_classes, dim=max(dim, n_classes),
                         n_cal=max(n_classes * 2, n_pool // 4),
                         n_test=n_pool - max(n_classes * 2, n_pool // 4), seed=seed)
    ds = generate_synthetic(spec)
    pool_emb = np.vstack([ds.cal_embeddings, ds.test_embeddings])
    n = ds.cal_labels.size
    Q = zero_shot_prob_matrix(pool_emb, ds.bank, config.tau)
    graph = build_graph(pool_emb, config.k)
    provider = make_provider(config)
    u_vec, attention = provider.compute(pool_emb, Q, ds.bank, labels=None)
    rule = config.score_rule()
    params = config.failure_params()
    rcfg = config.refine_config()

    def once() -> float:
        t0 = time.perf_counter()
        Z, _ = refine(Q, graph, rcfg, record_objective=False)
        starred = score_failure_aware(base_score_matrix(Z, rule), u_vec[:, None],
                                      attention, params)
        threshold = calibrate(starred[np.arange(n), ds.cal_labels], config.alpha)
        _ = [prediction_set_from_mask(row <= threshold.s_hat) for row in starred[n:]]
        return time.perf_counter() - t0

    once()  # warm-up
    return float(np.median([once() for _ in range(repeats)]))
