"""Score map and keypoint selection over a captured attention layer.

Works on the raw numpy dumps from model capture. The CLS token and any
register tokens are excluded from both the softmax and the keypoint set:
only image patches can become keypoints.
"""

from __future__ import annotations

import numpy as np

from vitexport.model import LayerCapture


def qkv_facets(cap: LayerCapture) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = cap.tokens.astype(np.float64)
    q = x @ cap.w_q.astype(np.float64) + cap.b_q.astype(np.float64)
    k = x @ cap.w_k.astype(np.float64) + cap.b_k.astype(np.float64)
    v = x @ cap.w_v.astype(np.float64) + cap.b_v.astype(np.float64)
    return q, k, v


def cls_score_map(cap: LayerCapture) -> np.ndarray:
    """Head-averaged softmax of patch queries against the CLS key, float32."""
    q, k, _ = qkv_facets(cap)
    skip = 1 + cap.n_registers
    d = q.shape[1]
    head_width = d // cap.heads
    patch_q = q[skip:]
    k_cls = k[0]
    acc = np.zeros(patch_q.shape[0], dtype=np.float64)
    for h in range(cap.heads):
        sl = slice(h * head_width, (h + 1) * head_width)
        logits = patch_q[:, sl] @ k_cls[sl] / np.sqrt(head_width)
        logits -= logits.max()
        e = np.exp(logits)
        acc += e / e.sum()
    return (acc / cap.heads).astype(np.float32)


def select_keypoints(cap: LayerCapture, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Scores and L2-normalized V rows of patches scoring strictly above threshold."""
    _, _, v = qkv_facets(cap)
    skip = 1 + cap.n_registers
    scores = cls_score_map(cap)
    keep = np.nonzero(scores > threshold)[0]
    rows = v[skip:][keep]
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm V row cannot become a keypoint descriptor")
    return scores[keep], (rows / norms).astype(np.float32)


def global_descriptor(cap: LayerCapture) -> np.ndarray:
    """L2-normalized output-layer CLS token."""
    cls = cap.final_tokens[0].astype(np.float64)
    norm = np.linalg.norm(cls)
    if norm == 0.0:
        raise ValueError("zero CLS token")
    return (cls / norm).astype(np.float32)
