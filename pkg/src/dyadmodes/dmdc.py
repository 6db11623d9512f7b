"""Windowed control-affine linear fits and their eigen-mode features.

Each window is modelled as

    targets ~= A @ states + B @ inputs

with [A B] the minimum-Frobenius-norm least-squares solution obtained by
multiplying the targets with the pseudo-inverse of the stacked snapshot
matrix [states; inputs]. A and B are d x d but never materialized on the
hot path: with w snapshots, A = targets @ G_s for a w x d factor G_s, and
the nonzero eigenvalues of A equal those of the small w x w product
G_s @ targets (the nonzero spectra of PQ and QP coincide). The same holds
for B via the input-aligned factor.

Eigen-modes are encoded as (magnitude, angle) pairs: magnitude orders a
mode's persistence, the angle its oscillation frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Window
from .errors import NumericalError, ValidationError
from .util import parallel_map

INPUT_TRANSITION = "T"
INPUT_CONTROL = "C"
INPUT_BOTH = "T+C"
INPUT_KINDS = (INPUT_TRANSITION, INPUT_CONTROL, INPUT_BOTH)

# |eigenvalue| above this multiple of the targets' largest singular value
# counts as a nonzero mode.
NONZERO_RTOL = 1e-10


@dataclass(frozen=True)
class DynamicsFit:
    """Low-rank factored solution of one window's least-squares problem.

    state_pinv / input_pinv are the w x d column blocks of the stacked
    snapshot pseudo-inverse aligned to states and inputs respectively, so
    A = targets @ state_pinv and B = targets @ input_pinv.
    """

    session_id: str
    start: int
    size: int
    targets: np.ndarray
    state_pinv: np.ndarray
    input_pinv: np.ndarray
    rank: int
    residual: float

    @property
    def window_ref(self) -> tuple[str, int, int]:
        return (self.session_id, self.start, self.size)

    @property
    def dim(self) -> int:
        return int(self.targets.shape[0])

    @property
    def degenerate(self) -> bool:
        """Snapshot matrix lost rank relative to its shape bound."""
        return self.rank < min(2 * self.dim, self.size)

    def transition_matrix(self) -> np.ndarray:
        """Materialize the d x d state-transition matrix (testing only)."""
        return self.targets @ self.state_pinv

    def control_matrix(self) -> np.ndarray:
        """Materialize the d x d input-coupling matrix (testing only)."""
        return self.targets @ self.input_pinv


@dataclass(frozen=True)
class ModeSpectrum:
    """Transition and control eigenvalues of one window fit."""

    session_id: str
    start: int
    size: int
    transition_eigs: np.ndarray
    control_eigs: np.ndarray
    nonzero_transition: int
    nonzero_control: int


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length (magnitude, angle) encoding of the dominant modes."""

    session_id: str
    start: int
    size: int
    input_kind: str
    n_modes: int
    values: np.ndarray


def pseudo_inverse(matrix: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse by SVD with a singular-value cutoff.

    Singular values at or below tol are treated as zero. The default cutoff
    is machine epsilon scaled by max(m, n) and the largest singular value.
    """
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise ValidationError("matrix contains non-finite entries")
    if tol is not None and tol < 0:
        raise ValidationError(f"tolerance must be >= 0, got {tol}")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    cutoff = _cutoff(s, matrix.shape, tol)
    r = int(np.sum(s > cutoff))
    if r == 0:
        return np.zeros((matrix.shape[1], matrix.shape[0]))
    return (vt[:r].T / s[:r]) @ u[:, :r].T


def _cutoff(s: np.ndarray, shape: tuple[int, int], tol: float | None) -> float:
    smax = float(s[0]) if s.size else 0.0
    if tol is None:
        return np.finfo(float).eps * max(shape) * smax
    # caller-supplied tol is relative to the largest singular value
    return tol * smax


def fit_window(window: Window, tol: float | None = None) -> DynamicsFit:
    """Solve the window's stacked least-squares problem in factored form.

    Stacks Z = [states; inputs] (2d x w), pseudo-inverts it, and splits the
    result into the state- and input-aligned blocks. The implied [A B] is
    the minimum-norm solution; the residual is the Frobenius norm of the
    unexplained part of the targets. An all-zero window fits with rank 0.
    """
    z = np.vstack([window.states, window.inputs])
    if not np.all(np.isfinite(z)) or not np.all(np.isfinite(window.targets)):
        raise ValidationError(f"window {window.session_id}@{window.start} has non-finite data")
    d = window.states.shape[0]
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    cutoff = _cutoff(s, z.shape, tol)
    r = int(np.sum(s > cutoff))
    if r == 0:
        zp = np.zeros((window.size, 2 * d))
        residual = float(np.linalg.norm(window.targets))
    else:
        zp = (vt[:r].T / s[:r]) @ u[:, :r].T
        # row space projector of the retained part: I - Vr Vr^T
        proj = window.targets - (window.targets @ vt[:r].T) @ vt[:r]
        residual = float(np.linalg.norm(proj))
    return DynamicsFit(
        session_id=window.session_id,
        start=window.start,
        size=window.size,
        targets=window.targets,
        state_pinv=zp[:, :d],
        input_pinv=zp[:, d:],
        rank=r,
        residual=residual,
    )


def fit_windows(windows, tol: float | None = None, jobs: int = 1) -> list[DynamicsFit]:
    """Fit many windows; deterministic for any job count."""
    return parallel_map(lambda w: fit_window(w, tol=tol), windows, jobs=jobs)


def eigenvalues(fit: DynamicsFit) -> ModeSpectrum:
    """Extract transition and control eigenvalues from the small products.

    Both spectra are reported at length min(d, w), ordered by magnitude
    descending, padded with zeros when the product has fewer values.
    """
    n_keep = min(fit.dim, fit.size)
    try:
        lam_t = np.linalg.eigvals(fit.state_pinv @ fit.targets)
        lam_c = np.linalg.eigvals(fit.input_pinv @ fit.targets)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue extraction failed: {exc}", fit.window_ref) from exc
    ztol = NONZERO_RTOL * _spectral_norm(fit.targets)
    lam_t = _order_and_pad(lam_t, n_keep)
    lam_c = _order_and_pad(lam_c, n_keep)
    return ModeSpectrum(
        session_id=fit.session_id,
        start=fit.start,
        size=fit.size,
        transition_eigs=lam_t,
        control_eigs=lam_c,
        nonzero_transition=int(np.sum(np.abs(lam_t) > ztol)),
        nonzero_control=int(np.sum(np.abs(lam_c) > ztol)),
    )


def _spectral_norm(m: np.ndarray) -> float:
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[0]) if s.size else 0.0


def _order_and_pad(lams: np.ndarray, n: int) -> np.ndarray:
    order = np.lexsort((np.arange(lams.size), np.angle(lams), -np.abs(lams)))
    lams = lams[order][:n]
    if lams.size < n:
        lams = np.concatenate([lams, np.zeros(n - lams.size, dtype=complex)])
    return lams


def select_dominant(spectrum: np.ndarray, n_modes: int) -> np.ndarray:
    """Top n_modes eigenvalues as (magnitude, angle) pairs, zero padded.

    Sorted by magnitude descending; ties break by angle ascending, then by
    original position. Returns a flat array of length 2 * n_modes.
    """
    if n_modes < 1:
        raise ValidationError(f"n_modes must be >= 1, got {n_modes}")
    spectrum = np.asarray(spectrum, dtype=complex)
    order = np.lexsort((np.arange(spectrum.size), np.angle(spectrum), -np.abs(spectrum)))
    top = spectrum[order][:n_modes]
    out = np.zeros(2 * n_modes)
    out[0 : 2 * top.size : 2] = np.abs(top)
    out[1 : 2 * top.size : 2] = np.angle(top)
    # a padded or exactly-zero mode is encoded as (0, 0)
    out[1 : 2 * top.size : 2] *= np.abs(top) > 0
    return out


def build_features(modes: ModeSpectrum, input_kind: str, n_modes: int) -> FeatureVector:
    """Encode a spectrum as the classifier input for one input kind.

    "T" uses transition modes, "C" control modes, "T+C" the transition block
    followed by the control block, each independently sorted and padded.
    """
    if input_kind not in INPUT_KINDS:
        raise ValidationError(f"input_kind must be one of {INPUT_KINDS}, got {input_kind!r}")
    blocks = []
    if input_kind in (INPUT_TRANSITION, INPUT_BOTH):
        blocks.append(select_dominant(modes.transition_eigs, n_modes))
    if input_kind in (INPUT_CONTROL, INPUT_BOTH):
        blocks.append(select_dominant(modes.control_eigs, n_modes))
    return FeatureVector(
        session_id=modes.session_id,
        start=modes.start,
        size=modes.size,
        input_kind=input_kind,
        n_modes=n_modes,
        values=np.concatenate(blocks),
    )


def feature_length(input_kind: str, n_modes: int) -> int:
    return (4 if input_kind == INPUT_BOTH else 2) * n_modes
