"""Cross-entropy, inverse cross-entropy and the mutual-information objective.

Single-vector helpers mirror the math directly; the ``*_batch`` variants and
the torch bridges route through :mod:`fuzzyoc.kernels`, which also supply
analytic gradients with respect to the predicted distributions. Training uses
those gradients through small ``torch.autograd.Function`` wrappers, so the
same code path is checked against finite differences in the tests.

Sign convention: :func:`mutual_information` returns a value to maximize. The
trainer feeds ``-MI`` into :func:`total_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels

CE_EPS = 1e-12
CE_INV_EPS = 1e-6
MI_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_u: float = 1.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_u"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _rows(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a vector or a batch of row vectors")
    return np.ascontiguousarray(a)


def _check_same(a, b, names):
    if a.shape != b.shape:
        raise ValueError(f"length mismatch between {names[0]} {a.shape} and {names[1]} {b.shape}")


# -- cross-entropy -----------------------------------------------------------

def cross_entropy_batch(pred, target, eps=CE_EPS):
    """Per-row ``-sum target * ln(max(pred, eps))`` and its gradient in ``pred``."""
    p, t = _rows(pred, "prediction"), _rows(target, "target")
    _check_same(p, t, ("prediction", "target"))
    return kernels.ce_rows(p, t, eps)


def cross_entropy(pred, target, eps=CE_EPS) -> float:
    loss, _ = cross_entropy_batch(pred, target, eps)
    return float(loss[0])


def cross_entropy_grad(pred, target, eps=CE_EPS) -> np.ndarray:
    _, g = cross_entropy_batch(pred, target, eps)
    return g[0]


# -- inverse cross-entropy ---------------------------------------------------

def ce_inverse_batch(p, q, eps=CE_INV_EPS):
    """Per-row ``-sum p * ln(max(1 - q, eps))`` with gradients in ``p`` and ``q``.

    ``1 - q`` is deliberately left unnormalized.
    """
    p, q = _rows(p, "p"), _rows(q, "q")
    _check_same(p, q, ("p", "q"))
    return kernels.ce_inverse_rows(p, q, eps)


def ce_inverse(p, q, eps=CE_INV_EPS) -> float:
    loss, _, _ = ce_inverse_batch(p, q, eps)
    return float(loss[0])


def ce_inverse_loss_batch(out1, out2, out3, eps=CE_INV_EPS):
    """``0.5 * CE^-1(out1, out3) + 0.5 * CE^-1(out2, out3)`` per row.

    Returns ``(loss, g1, g2, g3)``.
    """
    a, b, c = _rows(out1, "out1"), _rows(out2, "out2"), _rows(out3, "out3")
    _check_same(a, c, ("out1", "out3"))
    _check_same(b, c, ("out2", "out3"))
    l1, g1, gq1 = kernels.ce_inverse_rows(a, c, eps)
    l2, g2, gq2 = kernels.ce_inverse_rows(b, c, eps)
    return 0.5 * (l1 + l2), 0.5 * g1, 0.5 * g2, 0.5 * (gq1 + gq2)


def ce_inverse_loss(out1, out2, out3, eps=CE_INV_EPS) -> float:
    return float(ce_inverse_loss_batch(out1, out2, out3, eps)[0][0])


# -- joint matrix / mutual information ---------------------------------------

def joint_matrix(pairs) -> np.ndarray:
    """Symmetrized mean outer product of paired distributions.

    ``pairs`` is either a list of ``(u, v)`` vectors or a tuple of two
    ``(n, k)`` arrays.
    """
    u, v = _split_pairs(pairs)
    q = u.T @ v / u.shape[0]
    return 0.5 * (q + q.T)


def _split_pairs(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        u, v = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("joint matrix needs at least one pair")
        u = [p[0] for p in pairs]
        v = [p[1] for p in pairs]
    u, v = _rows(u, "u"), _rows(v, "v")
    if u.shape[0] == 0:
        raise ValueError("joint matrix needs at least one pair")
    _check_same(u, v, ("u", "v"))
    return u, v


def mutual_information(P, eps=MI_EPS) -> float:
    """``sum P_ab ln(P_ab / (P_a P_b))`` with row/column-sum marginals."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    mi, _ = kernels.mi_from_joint(P, eps)
    return float(mi)


def mutual_information_grad(P, eps=MI_EPS) -> np.ndarray:
    """Gradient of :func:`mutual_information` with respect to the entries of ``P``."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    return kernels.mi_from_joint(P, eps)[1]


def pair_mutual_information(u, v, eps=MI_EPS):
    """MI of ``joint_matrix((u, v))`` with gradients in ``u`` and ``v``.

    Returns ``(mi, P, grad_u, grad_v)``.
    """
    u, v = _split_pairs((np.atleast_2d(u), np.atleast_2d(v)))
    return kernels.joint_mi(u, v, eps)


def total_loss(supervised: float, unsupervised: float, weights: LossWeights) -> float:
    # a zero weight must contribute exactly zero, even for non-finite terms
    out = 0.0
    if weights.lambda_s:
        out += weights.lambda_s * supervised
    if weights.lambda_u:
        out += weights.lambda_u * unsupervised
    return out


# -- torch bridges -----------------------------------------------------------

def _np(t):
    return t.detach().to(torch.float64).cpu().numpy()


class _CrossEntropyMean(torch.autograd.Function):
    @staticmethod
    def forward(ctx, probs, target):
        loss, grad = cross_entropy_batch(_np(probs), _np(target))
        n = max(loss.shape[0], 1)
        ctx.save_for_backward(torch.from_numpy(grad / n).to(probs.dtype))
        return probs.new_tensor(loss.mean() if loss.size else 0.0)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return g * grad, None


class _CEInverseMean(torch.autograd.Function):
    @staticmethod
    def forward(ctx, o1, o2, o3):
        loss, g1, g2, g3 = ce_inverse_loss_batch(_np(o1), _np(o2), _np(o3))
        n = max(loss.shape[0], 1)
        ctx.save_for_backward(*(torch.from_numpy(g / n).to(o1.dtype) for g in (g1, g2, g3)))
        return o1.new_tensor(loss.mean() if loss.size else 0.0)

    @staticmethod
    def backward(ctx, g):
        g1, g2, g3 = ctx.saved_tensors
        return g * g1, g * g2, g * g3


class _PairMI(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, v):
        mi, _, gu, gv = pair_mutual_information(_np(u), _np(v))
        ctx.save_for_backward(torch.from_numpy(gu).to(u.dtype), torch.from_numpy(gv).to(u.dtype))
        return u.new_tensor(mi)

    @staticmethod
    def backward(ctx, g):
        gu, gv = ctx.saved_tensors
        return g * gu, g * gv


def torch_cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over rows; zero rows yield a zero loss."""
    if probs.shape[0] == 0:
        return probs.sum() * 0.0
    return _CrossEntropyMean.apply(probs, target)


def torch_ce_inverse_loss(o1, o2, o3) -> torch.Tensor:
    if o1.shape[0] == 0:
        return o1.sum() * 0.0
    return _CEInverseMean.apply(o1, o2, o3)


def torch_mutual_information(u, v) -> torch.Tensor:
    return _PairMI.apply(u, v)
