"""Window-level probabilistic classifiers over mode features.

Four model families, all trained deterministically: Gaussian naive Bayes,
L2-regularized logistic regression (Newton), linear SVM (dual coordinate
descent + Platt-calibrated probabilities), and k-nearest neighbors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateTrainingError, NumericalError, ValidationError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

GNB = "GNB"
LR = "LR"
LSVM = "LSVM"
KNN = "KNN"
MODEL_KINDS = (GNB, LR, LSVM, KNN)

SVM_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
KNN_K_GRID = (1, 3, 5, 10, 30, 50, 100)

GNB_VAR_SMOOTHING = 1e-9
LR_L2_WEIGHT = 1.0
LR_GRAD_TOL = 1e-6
SVM_GAP_TOL = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """Which model to train; c applies to LSVM only, k to KNN only."""

    kind: str
    c: float | None = None
    k: int | None = None
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if (self.c is not None) != (self.kind == LSVM):
            raise ValidationError("c must be given exactly when kind is LSVM")
        if (self.k is not None) != (self.kind == KNN):
            raise ValidationError("k must be given exactly when kind is KNN")
        if self.c is not None and self.c <= 0:
            raise ValidationError(f"c must be positive, got {self.c}")
        if self.k is not None and self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")

    @property
    def name(self) -> str:
        if self.kind == LSVM:
            c = self.c
            return f"LSVM_{int(c) if float(c).is_integer() else c}"
        if self.kind == KNN:
            return f"KNN_{self.k}"
        return self.kind


def parse_spec(name: str, seed: int = 0) -> ModelSpec:
    """Parse names like GNB, LR, LSVM_10, LSVM_0.01, KNN_5."""
    name = name.strip()
    if name in (GNB, LR):
        return ModelSpec(kind=name, seed=seed)
    if name.startswith("LSVM_"):
        return ModelSpec(kind=LSVM, c=float(name[5:]), seed=seed)
    if name.startswith("KNN_"):
        return ModelSpec(kind=KNN, k=int(name[4:]), seed=seed)
    raise ValidationError(f"cannot parse model spec {name!r}")


def default_model_grid(seed: int = 0) -> list[ModelSpec]:
    specs = [ModelSpec(kind=GNB, seed=seed), ModelSpec(kind=LR, seed=seed)]
    specs += [ModelSpec(kind=LSVM, c=c, seed=seed) for c in SVM_C_GRID]
    specs += [ModelSpec(kind=KNN, k=k, seed=seed) for k in KNN_K_GRID]
    return specs


@dataclass(frozen=True)
class TrainedModel:
    spec: ModelSpec
    feature_dim: int
    params: dict[str, np.ndarray]
    diagnostics: dict = field(default_factory=dict)


def _as_matrix(features) -> np.ndarray:
    if hasattr(features, "values") and not isinstance(features, np.ndarray):
        features = features.values
    arr = np.asarray(
        [f.values if hasattr(f, "values") else f for f in features]
        if not isinstance(features, np.ndarray)
        else features,
        dtype=float,
    )
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D feature matrix, got shape {arr.shape}")
    return arr


def train(spec: ModelSpec, features, labels) -> TrainedModel:
    """Fit one model. Requires at least one example of each label."""
    x = _as_matrix(features)
    y = np.asarray(labels, dtype=int)
    if y.shape != (x.shape[0],):
        raise ValidationError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    if not (np.any(y == 0) and np.any(y == 1)):
        raise DegenerateTrainingError("training set must contain both labels")

    if spec.kind == GNB:
        params, diag = _train_gnb(x, y)
    elif spec.kind == LR:
        params, diag = _train_lr(x, y)
    elif spec.kind == LSVM:
        params, diag = _train_lsvm(x, y, spec.c, seed=spec.seed)
    else:
        params, diag = _train_knn(x, y, spec)
    return TrainedModel(spec=spec, feature_dim=x.shape[1], params=params, diagnostics=diag)


def predict_proba(model: TrainedModel, features) -> np.ndarray | float:
    """Probability that each feature row came from a label-1 session."""
    x = np.asarray(
        features.values if hasattr(features, "values") else features, dtype=float
    )
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.feature_dim:
        raise ValidationError(
            f"feature length {x.shape[1]} does not match model dimension {model.feature_dim}"
        )
    kind = model.spec.kind
    if kind == GNB:
        p = _proba_gnb(model.params, x)
    elif kind == LR:
        p = _sigmoid(x @ model.params["weights"] + model.params["bias"][0])
    elif kind == LSVM:
        f = x @ model.params["weights"] + model.params["bias"][0]
        a, b = model.params["calibration"]
        p = _sigmoid(-(a * f + b))
    else:
        p = _proba_knn(model.params, x, model.spec)
    return float(p[0]) if single else p


def predict_label(model: TrainedModel, features, threshold: float = 0.5):
    """Hard decision: 1 iff the probability is at or above the threshold."""
    p = predict_proba(model, features)
    if np.isscalar(p):
        return int(p >= threshold)
    return (p >= threshold).astype(int)


# --- Gaussian naive Bayes -------------------------------------------------

def _train_gnb(x, y):
    max_var = float(x.var(axis=0).max())
    smoothing = GNB_VAR_SMOOTHING * (max_var if max_var > 0 else 1.0)
    means = np.stack([x[y == c].mean(axis=0) for c in (0, 1)])
    variances = np.stack([x[y == c].var(axis=0) for c in (0, 1)]) + smoothing
    priors = np.array([(y == c).mean() for c in (0, 1)])
    return (
        {"means": means, "variances": variances, "priors": priors},
        {"smoothing": smoothing},
    )


def _proba_gnb(params, x):
    means, variances, priors = params["means"], params["variances"], params["priors"]
    joint = np.empty((x.shape[0], 2))
    for c in (0, 1):
        ll = -0.5 * (
            np.log(2 * np.pi * variances[c]) + (x - means[c]) ** 2 / variances[c]
        ).sum(axis=1)
        joint[:, c] = np.log(priors[c]) + ll
    # normalize in log space
    return np.exp(joint[:, 1] - np.logaddexp(joint[:, 0], joint[:, 1]))


# --- logistic regression ---------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _lr_loss(xa, s, theta, l2):
    z = xa @ theta
    return float(np.logaddexp(0.0, -s * z).sum() + 0.5 * l2 * np.dot(theta[:-1], theta[:-1]))


def _train_lr(x, y, l2=LR_L2_WEIGHT, grad_tol=LR_GRAD_TOL, max_iter=100):
    """Full-batch Newton with backtracking on the regularized logistic loss."""
    n, dim = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    s = np.where(y == 1, 1.0, -1.0)
    theta = np.zeros(dim + 1)
    reg = np.append(np.full(dim, l2), 0.0)
    losses = [_lr_loss(xa, s, theta, l2)]
    grad_norm = np.inf
    for _ in range(max_iter):
        z = xa @ theta
        p = _sigmoid(z)
        grad = xa.T @ (p - (s + 1) / 2) + reg * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < grad_tol:
            break
        wdiag = np.maximum(p * (1 - p), 1e-12)
        hess = (xa * wdiag[:, None]).T @ xa + np.diag(reg)
        step = np.linalg.solve(hess, grad)
        # backtracking keeps the loss non-increasing
        t = 1.0
        base = losses[-1]
        for _ in range(50):
            cand = theta - t * step
            loss = _lr_loss(xa, s, cand, l2)
            if loss <= base:
                break
            t *= 0.5
        theta = theta - t * step
        losses.append(_lr_loss(xa, s, theta, l2))
    else:
        if grad_norm >= grad_tol:
            raise NumericalError(f"logistic regression did not converge (|grad|={grad_norm:.2e})")
    return (
        {"weights": theta[:-1], "bias": theta[-1:]},
        {"loss_history": np.array(losses), "grad_norm": grad_norm},
    )


# --- linear SVM ------------------------------------------------------------

@njit(cache=True, nogil=True)
def _svm_dual_cd(xa, s, c, gap_tol, max_epochs, seed):  # pragma: no cover - jitted
    n, dim = xa.shape
    alpha = np.zeros(n)
    w = np.zeros(dim)
    qdiag = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(dim):
            acc += xa[i, j] * xa[i, j]
        qdiag[i] = acc
    idx = np.arange(n)
    state = np.uint64(seed) * np.uint64(2685821657736338717) + np.uint64(1442695040888963407)
    gap = np.inf
    primal = np.inf
    for epoch in range(max_epochs):
        # fresh pass order each epoch (xorshift64 Fisher-Yates); cyclic order
        # zigzags badly at large c
        for i in range(n - 1, 0, -1):
            state ^= state << np.uint64(13)
            state ^= state >> np.uint64(7)
            state ^= state << np.uint64(17)
            j = int(state % np.uint64(i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        for t in range(n):
            i = idx[t]
            g = 0.0
            for j in range(dim):
                g += w[j] * xa[i, j]
            g = s[i] * g - 1.0
            old = alpha[i]
            new = old - g / qdiag[i]
            if new < 0.0:
                new = 0.0
            elif new > c:
                new = c
            if new != old:
                delta = (new - old) * s[i]
                for j in range(dim):
                    w[j] += delta * xa[i, j]
                alpha[i] = new
        # duality gap: primal (hinge + 0.5|w|^2) minus dual (sum a - 0.5|w|^2)
        wnorm2 = 0.0
        for j in range(dim):
            wnorm2 += w[j] * w[j]
        hinge = 0.0
        for i in range(n):
            m = 0.0
            for j in range(dim):
                m += w[j] * xa[i, j]
            v = 1.0 - s[i] * m
            if v > 0.0:
                hinge += v
        asum = 0.0
        for i in range(n):
            asum += alpha[i]
        primal = 0.5 * wnorm2 + c * hinge
        gap = primal - (asum - 0.5 * wnorm2)
        # gap is reported relative: the primal scale grows with c and n
        if gap < gap_tol * max(1.0, primal):
            return w, alpha, gap / max(1.0, primal), epoch + 1
    return w, alpha, gap / max(1.0, primal), max_epochs


def _train_lsvm(x, y, c, seed=0, gap_tol=SVM_GAP_TOL, max_epochs=100_000):
    n, dim = x.shape
    xa = np.ascontiguousarray(np.hstack([x, np.ones((n, 1))]))
    s = np.where(y == 1, 1.0, -1.0)
    w, alpha, gap, epochs = _svm_dual_cd(xa, s, float(c), float(gap_tol), max_epochs, int(seed))
    if gap >= gap_tol:
        raise NumericalError(
            f"SVM dual coordinate descent did not converge (relative gap={gap:.2e})"
        )
    decision = xa @ w
    a, b = _platt_calibrate(decision, y)
    return (
        {"weights": w[:-1], "bias": w[-1:], "calibration": np.array([a, b])},
        {"duality_gap": float(gap), "epochs": int(epochs), "support": int(np.sum(alpha > 0))},
    )


def _platt_calibrate(decision, y, max_iter=100, tol=1e-10):
    """Platt's sigmoid fit on training decision values.

    Minimizes the cross-entropy of t against 1/(1+exp(a*f+b)) with the
    standard smoothed targets; Newton iterations with backtracking.
    """
    n1 = int(np.sum(y == 1))
    n0 = len(y) - n1
    hi = (n1 + 1.0) / (n1 + 2.0)
    lo = 1.0 / (n0 + 2.0)
    t = np.where(y == 1, hi, lo)
    f = decision
    a, b = 0.0, float(np.log((n0 + 1.0) / (n1 + 1.0)))

    def objective(a_, b_):
        z = a_ * f + b_
        # -sum t*log(p) + (1-t)*log(1-p) with p = sigmoid(-z)
        return float(np.sum(t * np.logaddexp(0.0, z) + (1 - t) * np.logaddexp(0.0, -z)))

    obj = objective(a, b)
    for _ in range(max_iter):
        z = a * f + b
        p = _sigmoid(-z)
        d1 = t - p
        d2 = np.maximum(p * (1 - p), 1e-12)
        g_a = float(np.dot(d1, f))
        g_b = float(np.sum(d1))
        if max(abs(g_a), abs(g_b)) < tol:
            break
        h_aa = float(np.dot(d2, f * f)) + 1e-12
        h_ab = float(np.dot(d2, f))
        h_bb = float(np.sum(d2)) + 1e-12
        det = h_aa * h_bb - h_ab * h_ab
        step_a = (h_bb * g_a - h_ab * g_b) / det
        step_b = (h_aa * g_b - h_ab * g_a) / det
        stepsize = 1.0
        for _ in range(50):
            na, nb = a - stepsize * step_a, b - stepsize * step_b
            cand = objective(na, nb)
            if cand <= obj:
                break
            stepsize *= 0.5
        a, b = a - stepsize * step_a, b - stepsize * step_b
        obj = objective(a, b)
    return a, b


# --- k-nearest neighbors ---------------------------------------------------

def _train_knn(x, y, spec):
    params = {"points": x.copy(), "labels": y.copy()}
    if spec.standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        params["scale_mean"] = mu
        params["scale_std"] = sd
    return params, {}


def _proba_knn(params, x, spec):
    pts, labels = params["points"], params["labels"]
    if "scale_mean" in params:
        x = (x - params["scale_mean"]) / params["scale_std"]
        pts = (pts - params["scale_mean"]) / params["scale_std"]
    k = min(spec.k, pts.shape[0])
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (pts * pts).sum(axis=1)[None, :]
        - 2.0 * (x @ pts.T)
    )
    # stable sort keeps index order among distance ties
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return labels[nearest].mean(axis=1)


# --- model store -----------------------------------------------------------

_STORE_MAGIC = "dyadmodes-model-v1"


def save_model(model: TrainedModel, path: str | Path, meta: dict | None = None) -> None:
    """Write a model file: one JSON header line, then little-endian float64.

    Integer parameter arrays are stored as float64 for a uniform payload and
    restored via the header's dtype note.
    """
    arrays = []
    payload = b""
    for name in sorted(model.params):
        arr = np.asarray(model.params[name])
        arrays.append({"name": name, "shape": list(arr.shape), "kind": arr.dtype.kind})
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    header = {
        "format": _STORE_MAGIC,
        "spec": {
            "kind": model.spec.kind,
            "c": model.spec.c,
            "k": model.spec.k,
            "seed": model.spec.seed,
            "standardize": model.spec.standardize,
        },
        "feature_dim": model.feature_dim,
        "meta": meta or {},
        "arrays": arrays,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_model(path: str | Path) -> tuple[TrainedModel, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != _STORE_MAGIC:
            raise ValidationError(f"{path}: not a model file")
        params = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            flat = np.frombuffer(fh.read(8 * count), dtype="<f8")
            arr = flat.reshape(entry["shape"]).astype(float)
            if entry["kind"] in ("i", "u"):
                arr = arr.astype(int)
            params[entry["name"]] = arr
    sp = header["spec"]
    spec = ModelSpec(
        kind=sp["kind"], c=sp["c"], k=sp["k"], seed=sp["seed"], standardize=sp["standardize"]
    )
    return TrainedModel(spec=spec, feature_dim=header["feature_dim"], params=params), header["meta"]
