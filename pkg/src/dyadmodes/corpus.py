"""Session ingestion and windowing.

Turns a line-delimited session file into alternating therapist/client
exchanges, binary competence labels, aligned embedding matrices, and
fixed-size sliding windows ready for dynamics fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptySessionError,
    ParseError,
    ValidationError,
)

THERAPIST = "therapist"
CLIENT = "client"

# Rating-scale sub-score keys, plus the total under "ctrs".
SUBSCORE_KEYS = ("ag", "ap", "co", "fb", "gd", "hw", "ip", "cb", "pt", "sc", "un")
SCORE_KEYS = SUBSCORE_KEYS + ("ctrs",)

SUBSCORE_COMPETENT_MIN = 4
TOTAL_COMPETENT_MIN = 40


@dataclass(frozen=True)
class TalkTurn:
    """One utterance: who spoke and its embedding vector."""

    speaker: str
    embedding: np.ndarray
    text: str | None = None

    def __post_init__(self):
        if self.speaker not in (THERAPIST, CLIENT):
            raise ValidationError(f"unknown speaker {self.speaker!r}")
        emb = np.asarray(self.embedding, dtype=float)
        object.__setattr__(self, "embedding", emb)
        if emb.ndim != 1 or emb.size == 0:
            raise ValidationError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embedding contains non-finite values")


@dataclass(frozen=True)
class Session:
    """One recorded interaction with its per-skill integer ratings."""

    session_id: str
    client_id: str
    turns: tuple[TalkTurn, ...]
    subscores: dict[str, int]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        missing = [k for k in SUBSCORE_KEYS if k not in self.subscores]
        extra = [k for k in self.subscores if k not in SUBSCORE_KEYS]
        if missing or extra:
            raise ValidationError(
                f"session {self.session_id!r}: bad sub-score keys "
                f"(missing {missing}, unexpected {extra})"
            )
        for k, v in self.subscores.items():
            if not isinstance(v, int) or not 0 <= v <= 6:
                raise ValidationError(
                    f"session {self.session_id!r}: sub-score {k}={v!r} not an integer in 0..6"
                )

    @property
    def total(self) -> int:
        return sum(self.subscores[k] for k in SUBSCORE_KEYS)

    @property
    def dim(self) -> int:
        if not self.turns:
            raise EmptySessionError(f"session {self.session_id!r} has no turns")
        return int(self.turns[0].embedding.size)


@dataclass(frozen=True)
class AlignedPair:
    """Column-aligned therapist-input / client-observation matrices.

    Column j of `therapist` is the turn immediately preceding the client
    turn in column j of `client`; both are d x n_exchanges.
    """

    session_id: str
    therapist: np.ndarray
    client: np.ndarray

    @property
    def n_exchanges(self) -> int:
        return int(self.client.shape[1])

    @property
    def dim(self) -> int:
        return int(self.client.shape[0])


@dataclass(frozen=True)
class Window:
    """A run of `size` exchange transitions starting at exchange `start`.

    states  holds client columns t .. t+size-1,
    inputs  holds therapist columns t .. t+size-1,
    targets holds client columns t+1 .. t+size.
    """

    session_id: str
    start: int
    size: int
    states: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        d, w = self.states.shape
        if self.inputs.shape != (d, w) or self.targets.shape != (d, w) or w != self.size:
            raise ValidationError("window matrices must all be d x size")


def binarize_labels(session: Session) -> dict[str, int]:
    """Binary competence labels: sub-score >= 4, total >= 40."""
    labels = {k: int(session.subscores[k] >= SUBSCORE_COMPETENT_MIN) for k in SUBSCORE_KEYS}
    labels["ctrs"] = int(session.total >= TOTAL_COMPETENT_MIN)
    return labels


def _merge_run(turns: list[TalkTurn]) -> TalkTurn:
    if len(turns) == 1:
        return turns[0]
    emb = np.mean([t.embedding for t in turns], axis=0)
    texts = [t.text for t in turns if t.text]
    return TalkTurn(turns[0].speaker, emb, " ".join(texts) if texts else None)


def normalize_turns(session: Session) -> Session:
    """Collapse the turn list to a strict therapist/client alternation.

    Consecutive same-speaker turns are merged by element-wise mean; a leading
    client turn (no preceding therapist turn) and a trailing therapist turn
    (no following client turn) are dropped.
    """
    if len(session.turns) < 2:
        raise EmptySessionError(
            f"session {session.session_id!r}: need at least 2 turns, got {len(session.turns)}"
        )
    merged: list[TalkTurn] = []
    run: list[TalkTurn] = []
    for turn in session.turns:
        if run and turn.speaker != run[0].speaker:
            merged.append(_merge_run(run))
            run = []
        run.append(turn)
    merged.append(_merge_run(run))

    if merged and merged[0].speaker == CLIENT:
        merged = merged[1:]
    if merged and merged[-1].speaker == THERAPIST:
        merged = merged[:-1]
    if len(merged) < 2:
        raise EmptySessionError(
            f"session {session.session_id!r}: no therapist-client exchange after normalization"
        )
    return Session(session.session_id, session.client_id, tuple(merged), dict(session.subscores))


def align_pairs(session: Session) -> AlignedPair:
    """Stack a normalized session into d x T therapist/client matrices."""
    turns = session.turns
    if len(turns) % 2 != 0:
        raise ValidationError(f"session {session.session_id!r}: odd turn count, not normalized")
    for i, turn in enumerate(turns):
        want = THERAPIST if i % 2 == 0 else CLIENT
        if turn.speaker != want:
            raise ValidationError(
                f"session {session.session_id!r}: turn {i} is {turn.speaker}, "
                f"expected {want}; run normalize_turns first"
            )
    therapist = np.column_stack([t.embedding for t in turns[0::2]])
    client = np.column_stack([t.embedding for t in turns[1::2]])
    return AlignedPair(session.session_id, therapist, client)


def window_count(n_exchanges: int, size: int, stride: int = 1) -> int:
    """Number of windows a session of n_exchanges exchanges yields."""
    if n_exchanges <= size:
        return 0
    return (n_exchanges - size - 1) // stride + 1


def extract_windows(pair: AlignedPair, size: int, stride: int = 1) -> list[Window]:
    """Slice an aligned pair into sliding windows of `size` transitions.

    A window starting at t needs client columns t..t+size, so the last start
    is n_exchanges - size - 1; sessions with n_exchanges <= size yield none.
    """
    if size < 2:
        raise ValidationError(f"window size must be >= 2, got {size}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    windows = []
    for start in range(0, pair.n_exchanges - size, stride):
        windows.append(
            Window(
                session_id=pair.session_id,
                start=start,
                size=size,
                states=pair.client[:, start : start + size].copy(),
                inputs=pair.therapist[:, start : start + size].copy(),
                targets=pair.client[:, start + 1 : start + size + 1].copy(),
            )
        )
    return windows


def _parse_session(record: dict, line_number: int) -> Session:
    for key in ("session_id", "client_id", "subscores", "turns"):
        if key not in record:
            raise ParseError(line_number, f"missing field {key!r}")
    turns = []
    for j, t in enumerate(record["turns"]):
        try:
            turns.append(TalkTurn(t.get("speaker"), t.get("embedding"), t.get("text")))
        except (ValidationError, TypeError) as exc:
            raise ParseError(line_number, f"turn {j}: {exc}") from exc
    try:
        return Session(
            str(record["session_id"]),
            str(record["client_id"]),
            tuple(turns),
            dict(record["subscores"]),
        )
    except ValidationError as exc:
        raise ParseError(line_number, str(exc)) from exc


def load_corpus(path: str | Path) -> list[Session]:
    """Read a line-delimited session file, validating embedding dimensions.

    Raises ParseError naming the offending line, DimensionMismatchError when
    sessions disagree on embedding dimension.
    """
    sessions: list[Session] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_number, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ParseError(line_number, "record is not an object")
            session = _parse_session(record, line_number)
            for turn in session.turns:
                if dim is None:
                    dim = turn.embedding.size
                elif turn.embedding.size != dim:
                    raise DimensionMismatchError(
                        f"line {line_number}: session {session.session_id!r} has embedding "
                        f"dimension {turn.embedding.size}, corpus uses {dim}"
                    )
            sessions.append(session)
    return sessions


def save_corpus(sessions: list[Session], path: str | Path) -> None:
    """Write sessions in the same line-delimited format load_corpus reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            record = {
                "session_id": s.session_id,
                "client_id": s.client_id,
                "subscores": {k: s.subscores[k] for k in SUBSCORE_KEYS},
                "turns": [
                    {"speaker": t.speaker, "embedding": t.embedding.tolist()}
                    | ({"text": t.text} if t.text is not None else {})
                    for t in s.turns
                ],
            }
            fh.write(json.dumps(record) + "\n")
