"""Experimental protocol: grouped stratified folds, F1, bootstrap
significance baselines, grid sweeps, and Pearson correlation.

The grid trains one local model per (score, model, window size, mode count,
input kind) cell under client-grouped 5-fold cross-validation. Cells whose
fold-mean window-level F1 exceeds the prior-matched bootstrap 3-sigma
threshold advance to session-level aggregation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregate, classify, dmdc
from .corpus import (
    SCORE_KEYS,
    Session,
    align_pairs,
    binarize_labels,
    extract_windows,
    normalize_turns,
)
from .errors import (
    DegenerateTrainingError,
    InfeasibleSplitError,
    NumericalError,
    UndefinedCorrelationError,
    ValidationError,
)
from .util import derived_rng, parallel_map

STRATIFICATION_TOL = 0.10  # fold positive fraction within 10 points of corpus


def f1_score(preds, truth) -> float:
    """F1 on the positive label; 0 by convention when undefined."""
    preds = np.asarray(preds, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if preds.shape != truth.shape or preds.ndim != 1 or preds.size == 0:
        raise ValidationError(
            f"predictions and truth must be equal-length non-empty vectors, "
            f"got {preds.shape} and {truth.shape}"
        )
    tp = int(np.sum((preds == 1) & (truth == 1)))
    fp = int(np.sum((preds == 1) & (truth == 0)))
    fn = int(np.sum((preds == 0) & (truth == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass(frozen=True)
class FoldAssignment:
    """Client-grouped fold ids per session for one score key."""

    score_key: str
    n_folds: int
    seed: int
    fold_of: dict[str, int]
    fold_positive_fractions: tuple[float, ...]
    stratified: bool

    def __getitem__(self, session_id: str) -> int:
        return self.fold_of[session_id]


def make_folds(sessions: list[Session], score_key: str, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Greedy stratified grouped assignment.

    All sessions of a client share a fold. Clients are seed-shuffled, stably
    ordered by (group size, positive count) descending, and each placed on
    the fold that keeps sizes small and the positive fraction closest to the
    corpus fraction. Deterministic for a fixed seed.
    """
    if score_key not in SCORE_KEYS:
        raise ValidationError(f"unknown score key {score_key!r}")
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got {k}")
    label_of = {s.session_id: binarize_labels(s)[score_key] for s in sessions}
    clients: dict[str, list[str]] = {}
    for s in sessions:
        clients.setdefault(s.client_id, []).append(s.session_id)
    if len(clients) < k:
        raise InfeasibleSplitError(f"{len(clients)} clients cannot fill {k} folds")

    rng = derived_rng(seed, "folds", score_key)
    order = sorted(clients)
    rng.shuffle(order)
    order.sort(key=lambda cid: (-len(clients[cid]), -sum(label_of[s] for s in clients[cid])))

    corpus_frac = float(np.mean([label_of[s.session_id] for s in sessions]))
    sizes = [0] * k
    positives = [0] * k
    fold_of: dict[str, int] = {}
    for cid in order:
        group = clients[cid]
        g_size = len(group)
        g_pos = sum(label_of[s] for s in group)
        best = min(
            range(k),
            key=lambda f: (
                sizes[f] + g_size,
                abs((positives[f] + g_pos) / (sizes[f] + g_size) - corpus_frac),
                f,
            ),
        )
        sizes[best] += g_size
        positives[best] += g_pos
        for sid in group:
            fold_of[sid] = best

    fractions = tuple(positives[f] / sizes[f] if sizes[f] else 0.0 for f in range(k))
    stratified = all(abs(fr - corpus_frac) <= STRATIFICATION_TOL for fr in fractions)
    if not stratified:
        warnings.warn(
            f"fold positive fractions {fractions} deviate more than "
            f"{STRATIFICATION_TOL:.0%} from corpus fraction {corpus_frac:.3f} "
            f"for score {score_key!r}",
            stacklevel=2,
        )
    return FoldAssignment(score_key, k, seed, fold_of, fractions, stratified)


# --- bootstrap baselines ----------------------------------------------------

@dataclass(frozen=True)
class BaselineStats:
    mean: float
    sigma: float
    threshold_2sigma: float
    threshold_3sigma: float


def _bootstrap(labels, n_boot, seed) -> BaselineStats:
    truth = np.asarray(labels, dtype=int)
    if truth.size < 2:
        raise ValidationError("need at least 2 labels for a bootstrap baseline")
    if n_boot < 100:
        raise ValidationError(f"n_boot must be >= 100, got {n_boot}")
    p = float(truth.mean())
    if p in (0.0, 1.0):
        warnings.warn("all labels identical; baseline is degenerate", stacklevel=3)
    rng = np.random.default_rng(seed)
    preds = rng.random((int(n_boot), truth.size)) < p
    tp = (preds & (truth == 1)).sum(axis=1)
    fp = (preds & (truth == 0)).sum(axis=1)
    fn = (~preds & (truth == 1)).sum(axis=1)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    mean = float(f1.mean())
    sigma = float(f1.std(ddof=1))
    return BaselineStats(mean, sigma, mean + 2 * sigma, mean + 3 * sigma)


def bootstrap_local_baseline(window_labels, n_boot: int = 1000, seed=0) -> BaselineStats:
    """F1 distribution of a prior-matched random predictor over windows.

    Each replicate draws independent positives at the empirical positive
    rate and is scored against the real window labels.
    """
    return _bootstrap(window_labels, n_boot, seed)


def bootstrap_global_baseline(session_labels, n_boot: int = 1000, seed=0) -> BaselineStats:
    """Prior-matched random-predictor baseline over sessions."""
    return _bootstrap(session_labels, n_boot, seed)


# --- Pearson correlation ----------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    eps, fpmin = 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def pearson(x, y) -> tuple[float, float]:
    """Sample correlation and two-tailed p-value from the t statistic."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValidationError("need two equal-length vectors with at least 3 points")
    xm = x - x.mean()
    ym = y - y.mean()
    sx = float(np.dot(xm, xm))
    sy = float(np.dot(ym, ym))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    r = float(np.dot(xm, ym) / math.sqrt(sx * sy))
    r = max(-1.0, min(1.0, r))
    df = x.size - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = _betainc(df / 2.0, 0.5, df / (df + t2))
    return r, min(max(p, 0.0), 1.0)


# --- feature preparation ----------------------------------------------------

@dataclass
class CorpusFeatures:
    """Mode spectra per window size for a prepared corpus."""

    session_ids: list[str]
    labels: dict[str, dict[str, int]]  # session_id -> score_key -> label
    spectra: dict[int, dict[str, list[dmdc.ModeSpectrum]]]  # w -> sid -> spectra

    def feature_table(self, w: int, input_kind: str, n_modes: int) -> dict[str, np.ndarray]:
        """Per-session feature matrices for one grid cell."""
        out = {}
        for sid, specs in self.spectra[w].items():
            if specs:
                out[sid] = np.array(
                    [dmdc.build_features(sp, input_kind, n_modes).values for sp in specs]
                )
        return out

    def window_starts(self, w: int) -> dict[str, list[int]]:
        return {sid: [sp.start for sp in specs] for sid, specs in self.spectra[w].items()}


def prepare_features(
    sessions: list[Session],
    window_sizes,
    stride: int = 1,
    svd_tol: float | None = None,
    jobs: int = 1,
) -> CorpusFeatures:
    """Normalize, align, window, fit, and extract spectra for a corpus."""
    pairs = [align_pairs(normalize_turns(s)) for s in sessions]
    labels = {s.session_id: binarize_labels(s) for s in sessions}

    def spectra_for(pair, w):
        fits = [dmdc.fit_window(win, tol=svd_tol) for win in extract_windows(pair, w, stride)]
        return [dmdc.eigenvalues(f) for f in fits]

    spectra: dict[int, dict[str, list]] = {}
    for w in window_sizes:
        per_session = parallel_map(lambda pr: spectra_for(pr, w), pairs, jobs=jobs)
        spectra[int(w)] = {p.session_id: sp for p, sp in zip(pairs, per_session)}
    return CorpusFeatures(
        session_ids=[s.session_id for s in sessions], labels=labels, spectra=spectra
    )


# --- grid execution ----------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    score_keys: tuple = SCORE_KEYS
    model_names: tuple = tuple(s.name for s in classify.default_model_grid())
    window_sizes: tuple = (3, 5, 8)
    n_modes_list: tuple = (1, 3, 5, 7)
    input_kinds: tuple = dmdc.INPUT_KINDS
    accumulators: tuple = aggregate.ACCUMULATORS
    aggregators: tuple = aggregate.AGGREGATORS
    n_folds: int = 5
    n_boot: int = 1000
    svd_tol: float | None = None
    stride: int = 1
    threshold: float = 0.5
    soft_accumulation: bool = False
    keep_predictions: bool = False


@dataclass
class CellRun:
    """Per-fold outcome of one grid cell's local stage."""

    fold_models: list
    local_f1_folds: list[float]
    test_probs: dict[str, np.ndarray]  # out-of-fold window probabilities


@dataclass
class ExperimentResult:
    score_key: str
    model_name: str
    window_size: int
    n_modes: int
    input_kind: str
    local_f1: float
    local_f1_folds: tuple
    local_baseline_3sigma: float
    passed_local_baseline: bool
    global_f1: dict
    global_baseline_2sigma: float
    global_baseline_3sigma: float
    status: str = "ok"
    local_predictions: list = field(default_factory=list)
    global_predictions: list = field(default_factory=list)


def run_cell(
    spec: classify.ModelSpec,
    session_ids: list[str],
    features_by_session: dict[str, np.ndarray],
    label_by_session: dict[str, int],
    fold_of: dict[str, int],
    n_folds: int,
    threshold: float = 0.5,
) -> CellRun:
    """Train and score one grid cell across folds.

    Training never touches test-fold features or labels; each session's
    windows are predicted exactly once, by the model of its own fold.
    """
    usable = [sid for sid in session_ids if sid in features_by_session]
    fold_models = []
    local_f1s = []
    test_probs: dict[str, np.ndarray] = {}
    for f in range(n_folds):
        train_ids = [sid for sid in usable if fold_of[sid] != f]
        test_ids = [sid for sid in usable if fold_of[sid] == f]
        if not train_ids or not test_ids:
            raise DegenerateTrainingError(f"fold {f} has no train or no test sessions")
        x_train = np.vstack([features_by_session[sid] for sid in train_ids])
        y_train = np.concatenate(
            [np.full(len(features_by_session[sid]), label_by_session[sid]) for sid in train_ids]
        )
        model = classify.train(spec, x_train, y_train)
        fold_models.append(model)
        preds = []
        truth = []
        for sid in test_ids:
            probs = np.atleast_1d(classify.predict_proba(model, features_by_session[sid]))
            test_probs[sid] = probs
            preds.append(probs >= threshold)
            truth.append(np.full(probs.size, label_by_session[sid]))
        local_f1s.append(f1_score(np.concatenate(preds), np.concatenate(truth)))
    return CellRun(fold_models, local_f1s, test_probs)


def _run_global_stage(
    cell: CellRun,
    session_ids,
    features_by_session,
    label_by_session,
    fold_of,
    n_folds,
    accumulators,
    aggregators,
    threshold,
    soft,
    keep_predictions=False,
):
    usable = [sid for sid in session_ids if sid in features_by_session]
    per_combo_folds = {(acc, agg): [] for acc in accumulators for agg in aggregators}
    dumped = []
    for f in range(n_folds):
        model = cell.fold_models[f]
        train_ids = [sid for sid in usable if fold_of[sid] != f]
        test_ids = [sid for sid in usable if fold_of[sid] == f]
        train_labels = [label_by_session[sid] for sid in train_ids]
        test_labels = [label_by_session[sid] for sid in test_ids]
        train_probs = {
            sid: np.atleast_1d(classify.predict_proba(model, features_by_session[sid]))
            for sid in train_ids
        }
        for acc in accumulators:
            train_scores = [
                aggregate.accumulate(train_probs[sid], acc, threshold, session_id=sid, soft=soft)
                for sid in train_ids
            ]
            test_scores = [
                aggregate.accumulate(
                    cell.test_probs[sid], acc, threshold, session_id=sid, soft=soft
                )
                for sid in test_ids
            ]
            for agg in aggregators:
                try:
                    fitted = aggregate.fit_aggregator(agg, train_scores, train_labels)
                    preds = [aggregate.predict_session(fitted, sc) for sc in test_scores]
                except (DegenerateTrainingError, ValidationError):
                    per_combo_folds[(acc, agg)].append(float("nan"))
                    continue
                per_combo_folds[(acc, agg)].append(f1_score(preds, test_labels))
                if keep_predictions:
                    for sc, pred, lbl in zip(test_scores, preds, test_labels):
                        dumped.append((f, acc, agg, sc.session_id, sc.value, pred, lbl))
    combo_means = {
        combo: float(np.mean(vals)) if vals and not any(np.isnan(vals)) else float("nan")
        for combo, vals in per_combo_folds.items()
    }
    return combo_means, dumped


@dataclass
class GridRunResult:
    results: list[ExperimentResult]
    local_baselines: dict  # (score, w) -> BaselineStats
    global_baselines: dict  # score -> BaselineStats
    folds: dict  # score -> FoldAssignment
    features: CorpusFeatures
    n_failed: int


def run_grid(
    sessions: list[Session],
    config: GridConfig = GridConfig(),
    seed: int = 0,
    jobs: int = 1,
    features: CorpusFeatures | None = None,
) -> GridRunResult:
    """Sweep the full grid and evaluate local plus global tasks.

    Local baselines are computed per (score, window size) over all windows;
    only cells whose fold-mean local F1 strictly exceeds the 3-sigma
    threshold are aggregated globally. Failing cells are recorded and
    skipped. Deterministic for fixed seed and any job count.
    """
    for key in config.score_keys:
        if key not in SCORE_KEYS:
            raise ValidationError(f"unknown score key {key!r}")
    if features is None:
        features = prepare_features(
            sessions, config.window_sizes, config.stride, config.svd_tol, jobs=jobs
        )

    folds = {
        key: make_folds(sessions, key, k=config.n_folds, seed=seed)
        for key in config.score_keys
    }

    local_baselines = {}
    for key in config.score_keys:
        for w in config.window_sizes:
            window_labels = np.concatenate(
                [
                    np.full(len(specs), features.labels[sid][key])
                    for sid, specs in features.spectra[w].items()
                    if specs
                ]
            )
            local_baselines[(key, w)] = bootstrap_local_baseline(
                window_labels, config.n_boot, seed=derived_rng(seed, "local-baseline", key, w)
            )
    global_baselines = {
        key: bootstrap_global_baseline(
            [features.labels[sid][key] for sid in features.session_ids],
            config.n_boot,
            seed=derived_rng(seed, "global-baseline", key),
        )
        for key in config.score_keys
    }

    cells = [
        (key, name, w, n_modes, kind)
        for key in config.score_keys
        for name in config.model_names
        for w in config.window_sizes
        for n_modes in config.n_modes_list
        for kind in config.input_kinds
    ]
    tables = {
        (w, kind, n_modes): features.feature_table(w, kind, n_modes)
        for w in config.window_sizes
        for kind in config.input_kinds
        for n_modes in config.n_modes_list
    }

    def evaluate_cell(cell_key):
        key, name, w, n_modes, kind = cell_key
        spec = classify.parse_spec(name, seed=seed)
        feats = tables[(w, kind, n_modes)]
        label_by_session = {sid: features.labels[sid][key] for sid in features.session_ids}
        baseline = local_baselines[(key, w)]
        gbase = global_baselines[key]
        base_kwargs = dict(
            score_key=key,
            model_name=name,
            window_size=w,
            n_modes=n_modes,
            input_kind=kind,
            local_baseline_3sigma=baseline.threshold_3sigma,
            global_baseline_2sigma=gbase.threshold_2sigma,
            global_baseline_3sigma=gbase.threshold_3sigma,
        )
        try:
            cell = run_cell(
                spec,
                features.session_ids,
                feats,
                label_by_session,
                folds[key].fold_of,
                config.n_folds,
                config.threshold,
            )
        except (DegenerateTrainingError, ValidationError, NumericalError, np.linalg.LinAlgError) as exc:
            return ExperimentResult(
                local_f1=float("nan"),
                local_f1_folds=(),
                passed_local_baseline=False,
                global_f1={},
                status=f"failed: {exc}",
                **base_kwargs,
            )
        local_f1 = float(np.mean(cell.local_f1_folds))
        passed = local_f1 > baseline.threshold_3sigma
        global_f1 = {}
        gdump = []
        if passed:
            global_f1, gdump = _run_global_stage(
                cell,
                features.session_ids,
                feats,
                label_by_session,
                folds[key].fold_of,
                config.n_folds,
                config.accumulators,
                config.aggregators,
                config.threshold,
                config.soft_accumulation,
                keep_predictions=config.keep_predictions,
            )
        ldump = []
        if config.keep_predictions:
            starts = features.window_starts(w)
            for sid, probs in cell.test_probs.items():
                f = folds[key].fold_of[sid]
                for st, pr in zip(starts[sid], probs):
                    ldump.append(
                        (f, sid, st, float(pr), int(pr >= config.threshold), label_by_session[sid])
                    )
        return ExperimentResult(
            local_f1=local_f1,
            local_f1_folds=tuple(cell.local_f1_folds),
            passed_local_baseline=passed,
            global_f1=global_f1,
            local_predictions=ldump,
            global_predictions=gdump,
            **base_kwargs,
        )

    results = parallel_map(evaluate_cell, cells, jobs=jobs)
    n_failed = sum(1 for r in results if r.status != "ok")
    return GridRunResult(results, local_baselines, global_baselines, folds, features, n_failed)


def best_cells(result: GridRunResult) -> dict[str, ExperimentResult]:
    """Highest local-F1 cell per score key (NaN cells skipped)."""
    best: dict[str, ExperimentResult] = {}
    for r in result.results:
        if r.status != "ok" or math.isnan(r.local_f1):
            continue
        cur = best.get(r.score_key)
        if cur is None or r.local_f1 > cur.local_f1:
            best[r.score_key] = r
    return best
