"""Token-importance backends.

Simplified analogues of the two baseline families: a query-aware score from
an observation window (SnapKV-like) and a query-agnostic key-geometry score
(KeyDiff-like). Allocation only uses their rank order; distortion analysis
uses the normalized magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toymodel import attention_weights


@dataclass(frozen=True)
class ImportanceScores:
    scores: np.ndarray
    scorer_id: str = "custom"
    normalized: bool = False

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("scores must be one-dimensional")
        if np.any(~np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be finite and non-negative")
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.shape[0]

    def scaled(self, c: float) -> "ImportanceScores":
        return ImportanceScores(self.scores * c, self.scorer_id, False)


def attention_window_score(keys, window_queries, scale: float | None = None, n_heads: int = 1) -> ImportanceScores:
    """Mean softmax weight each cached key receives from the window queries
    (averaged over heads too)."""
    q = np.atleast_2d(np.asarray(window_queries, dtype=np.float64))
    if q.shape[0] == 0 or np.size(window_queries) == 0:
        raise ValueError("observation window is empty")
    w = attention_weights(keys, q, n_heads, scale)
    return ImportanceScores(w.mean(axis=(0, 1)), "attn-window")


def key_diversity_score(keys) -> ImportanceScores:
    """``1 - cos(K_i, anchor)`` where the anchor is the mean unit key.

    Keys pointing along the common direction are redundant and score low.
    When the unit keys cancel out exactly the anchor is undefined and every
    token gets the same score.
    """
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if k.shape[0] == 0:
        raise ValueError("no keys")
    norms = np.linalg.norm(k, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm key")
    unit = k / norms[:, None]
    anchor = unit.mean(axis=0)
    a_norm = np.linalg.norm(anchor)
    if a_norm < 1e-12:
        return ImportanceScores(np.ones(k.shape[0]), "key-diversity")
    cos = unit @ (anchor / a_norm)
    return ImportanceScores(np.clip(1.0 - cos, 0.0, 2.0), "key-diversity")


def random_score(n: int, seed: int = 0) -> ImportanceScores:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    # open interval (0, 1)
    s = rng.random(n)
    s[s == 0.0] = np.nextafter(0.0, 1.0)
    return ImportanceScores(s, "random")


def normalize(scores: ImportanceScores) -> ImportanceScores:
    total = float(np.sum(scores.scores))
    if total <= 0:
        raise ValueError("cannot normalize all-zero scores")
    return ImportanceScores(scores.scores / total, scores.scorer_id, True)


SCORERS = ("attn-window", "key-diversity", "random")


def score_tokens(name: str, keys_cached, window_queries=None, seed: int = 0, n_heads: int = 1) -> ImportanceScores:
    """Dispatch by CLI name."""
    if name == "attn-window":
        if window_queries is None:
            raise ValueError("attn-window scoring needs observation-window queries")
        return attention_window_score(keys_cached, window_queries, n_heads=n_heads)
    if name == "key-diversity":
        return key_diversity_score(keys_cached)
    if name == "random":
        return random_score(np.shape(keys_cached)[0], seed)
    raise ValueError(f"unknown scorer {name!r}; choose from {', '.join(SCORERS)}")
