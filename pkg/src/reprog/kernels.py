"""Loss and similarity primitives: Gram/HSIC/CKA, KL, cross-entropy, Dice, cosine.

All functions are pure, operate on ``torch.Tensor`` inputs, preserve the input
dtype, and are differentiable through torch autograd. Batch-level kernel
similarity follows the linear-kernel CKA construction: Gram matrices over the
batch, double centering with H = I - (1/n) 11^T, HSIC as the Frobenius inner
product of the centered matrices divided by (n-1)^2, and CKA as HSIC
normalized by the geometric mean of the self-HSIC terms.
"""

from __future__ import annotations

import torch

# Self-HSIC below this is treated as degenerate (constant features).
DEGENERATE_EPS = 1e-12


class DegenerateFeaturesError(ValueError):
    """CKA denominator vanished: one feature set is (near-)constant."""


class ZeroVectorError(ValueError):
    """Cosine similarity requested against a zero vector."""


def gram(features: torch.Tensor) -> torch.Tensor:
    """Linear-kernel Gram matrix K = X X^T for an (n, d) feature matrix.

    Each row is one sample's feature map flattened to a vector; the result
    is the n x n matrix of pairwise dot products.
    """
    if features.ndim != 2:
        raise ValueError(f"expected 2D (n, d) features, got shape {tuple(features.shape)}")
    if features.numel() == 0:
        raise ValueError("empty feature matrix")
    return features @ features.T


def center_gram(k: torch.Tensor) -> torch.Tensor:
    """Double-center a Gram matrix: H K H with H = I - (1/n) 11^T.

    Uses the expanded form K - rowmean - colmean + totalmean, which avoids
    materializing H. Row and column sums of the result are zero.
    """
    _check_square(k)
    if k.shape[0] < 2:
        raise ValueError(f"centering needs n >= 2, got n={k.shape[0]}")
    row_mean = k.mean(dim=1, keepdim=True)
    col_mean = k.mean(dim=0, keepdim=True)
    return k - row_mean - col_mean + row_mean.mean()


def hsic(k: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """HSIC(K, L) = <HKH, HLH>_F / (n - 1)^2 for raw Gram matrices K, L."""
    _check_square(k)
    _check_square(l)
    if k.shape != l.shape:
        raise ValueError(f"gram size mismatch: {tuple(k.shape)} vs {tuple(l.shape)}")
    n = k.shape[0]
    if n < 2:
        raise ValueError(f"hsic needs n >= 2, got n={n}")
    kc = center_gram(k)
    lc = center_gram(l)
    return (kc * lc).sum() / (n - 1) ** 2


def cka_loss(k: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """Negative normalized alignment: -HSIC(K,L) / sqrt(HSIC(K,K) HSIC(L,L)).

    Value lies in [-1, 0]; equals -1 when L is a positive multiple of K.
    Raises DegenerateFeaturesError when either self-HSIC falls below
    DEGENERATE_EPS (constant features), rather than silently returning 0.
    """
    hkl = hsic(k, l)
    hkk = hsic(k, k)
    hll = hsic(l, l)
    if float(hkk.detach()) <= DEGENERATE_EPS or float(hll.detach()) <= DEGENERATE_EPS:
        raise DegenerateFeaturesError(
            f"degenerate self-HSIC (K: {float(hkk.detach()):.3e}, L: {float(hll.detach()):.3e}); "
            "features are constant across the batch"
        )
    return -hkl / torch.sqrt(hkk * hll)


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(p) || softmax(q)) over the last dimension, temperature 1.

    Accepts a single logit vector or any batch of them; returns the mean KL
    over leading dimensions. Always >= 0, and 0 iff the softmaxes agree.
    """
    if p_logits.shape != q_logits.shape:
        raise ValueError(
            f"logit shape mismatch: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}"
        )
    if p_logits.shape[-1] < 2:
        raise ValueError("need at least 2 classes for a KL divergence")
    lp = torch.log_softmax(p_logits, dim=-1)
    lq = torch.log_softmax(q_logits, dim=-1)
    kl = (lp.exp() * (lp - lq)).sum(dim=-1)
    # Rounding can leave tiny negatives when the distributions coincide.
    return kl.mean().clamp_min(0.0)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy -log softmax(logits)[label] for (B, C) logits."""
    if logits.ndim != 2:
        raise ValueError(f"expected (B, C) logits, got shape {tuple(logits.shape)}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"labels shape {tuple(labels.shape)} does not match batch {logits.shape[0]}"
        )
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    lp = torch.log_softmax(logits, dim=-1)
    return -lp.gather(1, labels.view(-1, 1).long()).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """One minus the batch-mean Dice coefficient for soft masks.

    pred holds per-pixel foreground probabilities in [0, 1]; target is a
    binary mask of the same (B, H, W) shape. The smoothing constant is added
    to numerator and denominator so empty masks score 1 (loss 0).
    """
    if pred.shape != target.shape:
        raise ValueError(f"mask shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim != 3:
        raise ValueError(f"expected (B, H, W) masks, got shape {tuple(pred.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(1, 2))
    total = pred.sum(dim=(1, 2)) + target.sum(dim=(1, 2))
    dice = (2.0 * inter + smooth) / (total + smooth)
    return 1.0 - dice.mean()


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between two flattened nonzero vectors."""
    u = u.reshape(-1)
    v = v.reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"vector length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if float(nu.detach()) == 0.0 or float(nv.detach()) == 0.0:
        raise ZeroVectorError("cosine similarity undefined for zero vectors")
    return (u @ v) / (nu * nv)


def _check_square(k: torch.Tensor) -> None:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {tuple(k.shape)}")
