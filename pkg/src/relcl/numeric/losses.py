from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, concat, cosine_rows, logsumexp, reshape, scale, take_rows, add


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def info_nce(sims, positive_mask, tau: float) -> Tensor:
    """Per-row contrastive negative log-likelihood.

    ``sims`` is an (M, K) tensor of similarities between M anchors and
    their K candidates. Row m loses
    ``-log(sum_pos exp(s/tau) / sum_all exp(s/tau))``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    sims = as_tensor(sims)
    mask = np.asarray(positive_mask, dtype=bool)
    if mask.shape != sims.shape:
        raise ValueError(f"positive mask {mask.shape} does not match similarities {sims.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every anchor needs at least one positive candidate")
    logits = scale(sims, 1.0 / tau)
    return add(logsumexp(logits), scale(logsumexp(logits, mask), -1.0))


def contrastive_nll(anchor, candidates, positive_indices, tau: float) -> Tensor:
    """Single-anchor contrastive loss over a candidate list.

    With one positive this is the usual InfoNCE term; with several it is
    the multi-positive form used for entity tokens.
    """
    positive_indices = sorted(set(int(i) for i in positive_indices))
    if not positive_indices:
        raise ValueError("positive_indices must be nonempty")
    cands = [as_tensor(c) for c in candidates]
    k = len(cands)
    if positive_indices[0] < 0 or positive_indices[-1] >= k:
        raise ValueError("positive index out of range")
    anchor = as_tensor(anchor)
    a = reshape(anchor, (1, -1))
    stacked = concat([reshape(c, (1, -1)) for c in cands], axis=0)
    sims = cosine_rows(take_rows(a, np.zeros(k, dtype=np.intp)), stacked)
    mask = np.zeros(k, dtype=bool)
    mask[positive_indices] = True
    loss = info_nce(reshape(sims, (1, k)), mask[None, :], tau)
    return reshape(loss, ())
