"""Synthetic labeled corpora from planted linear dynamical systems.

Each label's sessions are simulated from a known (A*, B*) pair built to
have a prescribed spectrum, so the whole pipeline can be verified against
ground truth: fitted transition modes should recover the planted ones, and
classifiers should separate labels exactly when the planted spectra differ.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import CLIENT, SUBSCORE_KEYS, THERAPIST, Session, TalkTurn
from .errors import GenerationError, ValidationError
from .util import derived_rng, parallel_map

DEFAULT_DIM = 3
DEFAULT_TRANSITION_EIGS = ((0.2,), (0.9,))  # label 0, label 1
DEFAULT_CONTROL_EIGS = (0.8, 0.65, 0.5)
DEFAULT_NOISE = 0.1
DEFAULT_LENGTH_RANGE = (10, 30)


@dataclass(frozen=True)
class PlantedSystem:
    """Ground-truth dynamics with a known, exactly-recorded spectrum."""

    transition: np.ndarray
    control: np.ndarray
    transition_eigs: tuple[complex, ...]
    control_eigs: tuple[complex, ...]
    noise_sigma: float
    label: int

    @property
    def dim(self) -> int:
        return int(self.transition.shape[0])

    @property
    def spectral_radius(self) -> float:
        return max((abs(v) for v in self.transition_eigs), default=0.0)


def _conjugate_closed(eigs) -> list[complex]:
    eigs = [complex(v) for v in eigs]
    pool = list(eigs)
    for v in eigs:
        if abs(v.imag) < 1e-15:
            continue
        conj = v.conjugate()
        for cand in pool:
            if cand is not v and abs(cand - conj) < 1e-12:
                pool.remove(cand)
                break
        else:
            raise ValidationError(f"eigenvalue {v} has no conjugate partner")
    return eigs


def _real_canonical(dim: int, eigs: list[complex]) -> np.ndarray:
    """Block-diagonal real matrix with the requested spectrum, zero padded."""
    mat = np.zeros((dim, dim))
    i = 0
    remaining = list(eigs)
    while remaining:
        lam = remaining.pop(0)
        if abs(lam.imag) < 1e-15:
            mat[i, i] = lam.real
            i += 1
        else:
            for j, mu in enumerate(remaining):
                if abs(mu - lam.conjugate()) < 1e-12:
                    remaining.pop(j)
                    break
            a, b = lam.real, abs(lam.imag)
            mat[i, i] = a
            mat[i, i + 1] = b
            mat[i + 1, i] = -b
            mat[i + 1, i + 1] = a
            i += 2
    return mat


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_planted_system(
    dim: int,
    transition_eigs,
    control_eigs,
    seed: int = 0,
    noise_sigma: float = 0.0,
    label: int = 1,
) -> PlantedSystem:
    """Build (A*, B*) with the requested spectra via orthogonal similarity.

    Eigenvalue lists must be conjugate-closed and no longer than dim; unused
    dimensions get zero blocks. The same seed yields the same orientation,
    so two systems differing only in eigenvalues share their eigenvectors.
    """
    t_eigs = _conjugate_closed(transition_eigs)
    c_eigs = _conjugate_closed(control_eigs)
    if len(t_eigs) > dim or len(c_eigs) > dim:
        raise ValidationError("more eigenvalues than dimensions")
    rng = derived_rng(seed, "planted-system")
    q_t = _random_orthogonal(dim, rng)
    q_c = _random_orthogonal(dim, rng)
    transition = q_t @ _real_canonical(dim, t_eigs) @ q_t.T
    control = q_c @ _real_canonical(dim, c_eigs) @ q_c.T
    system = PlantedSystem(
        transition=transition,
        control=control,
        transition_eigs=tuple(t_eigs),
        control_eigs=tuple(c_eigs),
        noise_sigma=float(noise_sigma),
        label=int(label),
    )
    if system.spectral_radius > 1.0:
        warnings.warn(
            f"planted spectral radius {system.spectral_radius:.3f} > 1; "
            "trajectories may grow",
            stacklevel=2,
        )
    return system


def simulate_session(
    system: PlantedSystem, length: int, seed: int = 0, session_id: str = "synth", client_id: str = "client"
) -> Session:
    """Simulate `length` exchanges of the planted dynamics as a Session.

    Inputs are i.i.d. unit Gaussian per element; the state update is
    y[t+1] = A* y[t] + B* x[t] + noise. Each exchange is emitted as a
    therapist turn (the input) followed by a client turn (the state), so the
    aligned matrices reproduce the generative equation exactly. Sub-scores
    are all 6 for label-1 systems and all 0 otherwise, so binarization
    recovers the planted label.
    """
    if length < 2:
        raise ValidationError(f"session length must be >= 2, got {length}")
    rng = derived_rng(seed, "simulate")
    d = system.dim
    x = rng.standard_normal((d, length))
    y = np.empty((d, length))
    y[:, 0] = rng.standard_normal(d)
    for t in range(length - 1):
        y[:, t + 1] = system.transition @ y[:, t] + system.control @ x[:, t]
        if system.noise_sigma:
            y[:, t + 1] += system.noise_sigma * rng.standard_normal(d)
        if not np.all(np.isfinite(y[:, t + 1])):
            raise GenerationError(t + 1, "state became non-finite (unstable system?)")
    turns = []
    for t in range(length):
        turns.append(TalkTurn(THERAPIST, x[:, t]))
        turns.append(TalkTurn(CLIENT, y[:, t]))
    score = 6 if system.label == 1 else 0
    return Session(
        session_id=session_id,
        client_id=client_id,
        turns=tuple(turns),
        subscores={k: score for k in SUBSCORE_KEYS},
    )


def make_labeled_corpus(
    system0: PlantedSystem,
    system1: PlantedSystem,
    n_sessions: int = 40,
    n_clients: int = 20,
    length_range: tuple[int, int] = DEFAULT_LENGTH_RANGE,
    seed: int = 0,
    jobs: int = 1,
) -> list[Session]:
    """Generate a half/half labeled corpus with grouped client ownership.

    Clients are split between the labels and sessions assigned round-robin,
    so whenever n_sessions > n_clients some clients own several sessions and
    grouped cross-validation is exercised. Session lengths are drawn
    uniformly from length_range (inclusive).
    """
    if n_clients > n_sessions:
        raise ValidationError("n_clients cannot exceed n_sessions")
    if n_clients < 2 or n_sessions < 2:
        raise ValidationError("need at least 2 sessions and 2 clients")
    lo, hi = length_range
    if lo < 2 or hi < lo:
        raise ValidationError(f"bad length range {length_range}")
    if system0.label == system1.label:
        raise ValidationError("the two systems must carry different labels")

    length_rng = derived_rng(seed, "lengths")
    n1 = n_sessions // 2
    n0 = n_sessions - n1
    clients1 = n_clients // 2
    clients0 = n_clients - clients1
    plan = []
    for label, system, count, n_cl, cl_base in (
        (system0.label, system0, n0, clients0, 0),
        (system1.label, system1, n1, clients1, clients0),
    ):
        for j in range(count):
            plan.append(
                (
                    system,
                    f"s{label}{j:03d}",
                    f"c{cl_base + j % n_cl:03d}",
                )
            )
    lengths = length_rng.integers(lo, hi + 1, size=len(plan))

    def build(item):
        i, (system, sid, cid) = item
        return simulate_session(
            system, int(lengths[i]), seed=derived_rng(seed, "session", i).integers(2**32),
            session_id=sid, client_id=cid,
        )

    return parallel_map(build, list(enumerate(plan)), jobs=jobs)


def default_systems(
    null: bool = False,
    dim: int = DEFAULT_DIM,
    noise_sigma: float = DEFAULT_NOISE,
    seed: int = 0,
) -> tuple[PlantedSystem, PlantedSystem]:
    """The standard verification pair: distinct (or identical, when null)
    transition spectra over a shared full-rank control matrix."""
    eigs0, eigs1 = DEFAULT_TRANSITION_EIGS
    if null:
        eigs0 = eigs1
    common = dict(dim=dim, control_eigs=DEFAULT_CONTROL_EIGS, noise_sigma=noise_sigma, seed=seed)
    return (
        make_planted_system(transition_eigs=eigs0, label=0, **common),
        make_planted_system(transition_eigs=eigs1, label=1, **common),
    )
