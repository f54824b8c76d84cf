"""Place retrieval and attention-based match verification.

A frame is summarized two ways: a unit-norm place descriptor used for
retrieval (inner-product similarity, threshold 0.95), and a TokenSet of
query/key token matrices used for verification.  A retrieval candidate
between frames 1 (retrieved) and 2 (query) is scored by

    gamma_t = max_rows softmax(Q2 K1^T / sqrt(d))[:, t]
              / max_rows softmax(Q1 K1^T / sqrt(d))[:, t]

one ratio per key token t, and alpha = mean of the top 25% of gamma.
The denominator is the frame's own self-attention sharpness, so a key
token only scores near 1 when some query of the other frame attends to
it as strongly as its own frame does.  alpha may exceed 1; the pair is
accepted when alpha >= 0.85.

Descriptor queries skip the current and the immediately previous submap,
so adjacent-in-time frames never gate a loop closure.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError

RETRIEVAL_THRESHOLD = 0.95
MATCH_THRESHOLD = 0.85
TOP_FRACTION = 0.25
_GAMMA_FLOOR = 1e-12
_DESC_NORM_TOL = 1e-6


@dataclass
class TokenSet:
    """Per-frame query/key token matrices, shape (n_tokens, channels)."""

    q: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.q.ndim != 2 or self.q.shape != self.k.shape:
            raise DimensionMismatchError(
                f"q and k must share one (n, d) shape, got {self.q.shape} vs {self.k.shape}"
            )
        if self.q.shape[0] < 1 or self.q.shape[1] < 1:
            raise DimensionMismatchError("token matrices must be non-empty")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.k))):
            raise DimensionMismatchError("token matrices must be finite")


@dataclass
class LoopCandidate:
    query_frame_id: int
    retrieved_frame_id: int
    retrieval_similarity: float
    match_score: float | None = None
    accepted: bool = False


class DescriptorDB:
    """Append-only store of (frame_id, submap_id, unit descriptor)."""

    def __init__(self):
        self.entries: list[tuple[int, int, np.ndarray]] = []
        self._matrix: np.ndarray | None = None

    def add(self, frame_id: int, submap_id: int, descriptor: np.ndarray) -> None:
        descriptor = np.asarray(descriptor, dtype=np.float64)
        if descriptor.ndim != 1:
            raise DimensionMismatchError("descriptor must be a vector")
        if abs(np.linalg.norm(descriptor) - 1.0) > _DESC_NORM_TOL:
            raise DimensionMismatchError("descriptor must be unit-norm within 1e-6")
        if self.entries and descriptor.shape != self.entries[0][2].shape:
            raise DimensionMismatchError("descriptor dimension changed")
        self.entries.append((frame_id, submap_id, descriptor))
        self._matrix = None

    def __len__(self) -> int:
        return len(self.entries)

    def _stacked(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([e[2] for e in self.entries])
        return self._matrix


def query_place(db: DescriptorDB, desc: np.ndarray, current_submap_id: int,
                retrieval_threshold: float = RETRIEVAL_THRESHOLD):
    """Best stored frame by descriptor similarity, or None below threshold.

    Entries from the current and the immediately previous submap are
    excluded; ties resolve to the earliest insertion.
    """
    if not db.entries:
        return None
    desc = np.asarray(desc, dtype=np.float64)
    if abs(np.linalg.norm(desc) - 1.0) > _DESC_NORM_TOL:
        raise DimensionMismatchError("query descriptor must be unit-norm within 1e-6")
    sims = db._stacked() @ desc
    excluded = (current_submap_id, current_submap_id - 1)
    best_idx = -1
    best_sim = -np.inf
    for idx, (_, submap_id, _) in enumerate(db.entries):
        if submap_id in excluded:
            continue
        if sims[idx] > best_sim:
            best_sim = sims[idx]
            best_idx = idx
    if best_idx < 0 or best_sim < retrieval_threshold:
        return None
    return db.entries[best_idx][0], float(best_sim)


def attention_scores(q: np.ndarray, k: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Row-wise softmax of q k^T with 1/sqrt(d) temperature by default."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionMismatchError(
            f"channel dims must agree, got {q.shape} vs {k.shape}"
        )
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    logits = (q @ k.T) * scale
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def match_gamma(tok1: TokenSet, q2: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Per-key-token attention ratio between frame 2 queries and frame 1."""
    cross = attention_scores(q2, tok1.k, scale)
    self_attn = attention_scores(tok1.q, tok1.k, scale)
    numer = cross.max(axis=0)
    denom = np.maximum(self_attn.max(axis=0), _GAMMA_FLOOR)
    return numer / denom


def match_score(gamma: np.ndarray, top_fraction: float = TOP_FRACTION) -> float:
    """Mean of the ceil(top_fraction * n) largest ratios."""
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.shape[0]
    if gamma.ndim != 1 or n < 1:
        raise DimensionMismatchError("gamma must be a non-empty vector")
    m = min(max(int(math.ceil(top_fraction * n)), 1), n)
    top = np.partition(gamma, n - m)[n - m:]
    return float(np.mean(top))


def verify_pair(tok_query: TokenSet, tok_retrieved: TokenSet,
                threshold: float = MATCH_THRESHOLD,
                scale: float | None = None,
                top_fraction: float = TOP_FRACTION):
    """Match score between a query frame and a retrieved frame.

    The retrieved frame plays the self-attention role (its q and k), the
    query frame contributes its queries.  Returns (alpha, accepted).
    """
    alpha = match_score(match_gamma(tok_retrieved, tok_query.q, scale), top_fraction)
    return alpha, bool(alpha >= threshold)
