"""Single-layer self-attention facet math for keypoint extraction.

Given one transformer layer's token matrix and its query/key/value
projection weights, this module computes the Q/K/V facets, the attention
output, the patch-vs-CLS attention score map used for keypoint selection,
and the thresholded keypoint set itself. All functions are pure;
intermediate arithmetic runs in float64 and results are emitted as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placerec.store import LocalFeature

DEFAULT_KEYPOINT_THRESHOLD = 0.05
DEFAULT_MATCH_THRESHOLD = 0.65


@dataclass(frozen=True)
class Thresholds:
    """Pipeline thresholds: keypoint selection score and match similarity."""

    keypoint_score: float = DEFAULT_KEYPOINT_THRESHOLD
    match_similarity: float = DEFAULT_MATCH_THRESHOLD

    def __post_init__(self):
        if self.keypoint_score < 0:
            raise ValueError("keypoint score threshold must be >= 0")
        if not -1.0 <= self.match_similarity <= 1.0:
            raise ValueError("match similarity threshold must be in [-1, 1]")


@dataclass(frozen=True)
class ProjectionWeights:
    """Q/K/V projection weights of one attention layer.

    All three matrices are (d_model, d); biases default to zero. ``heads``
    partitions the width d into equal per-head slices.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    heads: int = 1

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ValueError("projection matrices must share one shape")
        if self.w_q.ndim != 2:
            raise ValueError("projection matrices must be 2-D")
        d = self.w_q.shape[1]
        if self.heads < 1 or d % self.heads != 0:
            raise ValueError(f"width {d} not divisible into {self.heads} heads")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]


@dataclass(frozen=True)
class LayerFacets:
    """Q, K, V facet matrices of one layer, (p+1, d) with row 0 the CLS token."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    heads: int = 1
    layer_offset: int = 1  # distance from the output layer; 1 = penultimate

    @property
    def cls_key(self) -> np.ndarray:
        """Key row of the CLS token (K row 0)."""
        return self.k[0]

    @property
    def n_patches(self) -> int:
        return self.q.shape[0] - 1

    @property
    def d(self) -> int:
        return self.q.shape[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector, float32 output.

    Max-subtraction plus float64 accumulation; shift-invariant and
    argmax-preserving.
    """
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    x = logits.astype(np.float64)
    x = x - x.max()
    e = np.exp(x)
    return (e / e.sum()).astype(np.float32)


def project_facets(
    tokens: np.ndarray, weights: ProjectionWeights, layer_offset: int = 1
) -> LayerFacets:
    """Project a (p+1, d_model) token matrix into its Q/K/V facets.

    Row 0 of the input must be the CLS token. Raises on dimension
    mismatch and on non-finite values in either input or output.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"token matrix must be 2-D, got shape {tokens.shape}")
    if tokens.shape[0] < 2:
        raise ValueError("need the CLS token plus at least one patch token")
    if tokens.shape[1] != weights.d_model:
        raise ValueError(
            f"token width {tokens.shape[1]} does not match projection input "
            f"dimension {weights.d_model}"
        )
    if not np.isfinite(tokens).all():
        raise ValueError("token matrix contains non-finite values")

    x = tokens.astype(np.float64)
    out = []
    for w, b in ((weights.w_q, weights.b_q), (weights.w_k, weights.b_k), (weights.w_v, weights.b_v)):
        y = x @ w.astype(np.float64)
        if b is not None:
            y = y + b.astype(np.float64)
        if not np.isfinite(y).all():
            raise ValueError("non-finite facet values; projection weights look corrupt")
        out.append(y.astype(np.float32))
    return LayerFacets(q=out[0], k=out[1], v=out[2], heads=weights.heads,
                       layer_offset=layer_offset)


def attention_output(facets: LayerFacets) -> np.ndarray:
    """Scaled dot-product attention output, (p+1, d) float32.

    Row i is sum_j softmax_j(q_i . k_j / sqrt(d)) v_j, so each row is a
    convex combination of V rows and the weights of each row sum to 1.
    """
    q = facets.q.astype(np.float64)
    k = facets.k.astype(np.float64)
    v = facets.v.astype(np.float64)
    logits = q @ k.T / np.sqrt(facets.d)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return (w @ v).astype(np.float32)


def cls_attention_scores(facets: LayerFacets, scaled: bool = True) -> np.ndarray:
    """Attention of each patch query against the CLS key, softmaxed over patches.

    Per head: softmax over the p patches of q_i^h . cls_key^h (scaled by
    1/sqrt(d/heads) unless ``scaled`` is False); heads are then averaged.
    The CLS row is excluded from both the logits and the output, so the
    result has length p, sums to 1, and every entry is strictly positive.
    """
    p = facets.n_patches
    if p < 1:
        raise ValueError("need at least one patch token")
    hw = facets.d // facets.heads
    q = facets.q[1:].astype(np.float64)  # patch rows only
    k_cls = facets.cls_key.astype(np.float64)
    scale = 1.0 / np.sqrt(hw) if scaled else 1.0

    acc = np.zeros(p, dtype=np.float64)
    for h in range(facets.heads):
        sl = slice(h * hw, (h + 1) * hw)
        logits = (q[:, sl] @ k_cls[sl]) * scale
        logits -= logits.max()
        e = np.exp(logits)
        acc += e / e.sum()
    return (acc / facets.heads).astype(np.float32)


def select_keypoints(
    facets: LayerFacets, scores: np.ndarray, threshold: float
) -> list[LocalFeature]:
    """Patches whose score strictly exceeds *threshold*, in patch order.

    Each selected patch yields its L2-normalized V row as descriptor with
    the patch score attached. An empty result is legal.
    """
    scores = np.asarray(scores)
    if scores.shape != (facets.n_patches,):
        raise ValueError(
            f"score map length {scores.shape} does not match {facets.n_patches} patches"
        )
    selected: list[LocalFeature] = []
    for i in np.nonzero(scores > threshold)[0]:
        row = facets.v[i + 1].astype(np.float64)
        norm = np.linalg.norm(row)
        if norm == 0.0:
            raise ValueError(f"patch {i}: zero V row cannot be normalized")
        selected.append(
            LocalFeature(score=float(scores[i]), descriptor=(row / norm).astype(np.float32))
        )
    return selected
