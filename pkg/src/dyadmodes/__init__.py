"""Windowed control-affine dynamics features for two-party interactions.

Fits per-window linear transition/control models to paired embedding
streams, extracts dominant eigen-modes as features, classifies windows
against session-level competence labels, and aggregates window predictions
into session predictions, with a grouped cross-validation and bootstrap
significance harness plus a synthetic planted-system oracle.
"""

__version__ = "0.1.0"

from . import aggregate, classify, corpus, dmdc, evaluation, report, synth  # noqa: F401
