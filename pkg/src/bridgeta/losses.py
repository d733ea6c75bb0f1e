"""Dual-path distillation losses and the training objective.

The direct teacher-to-student alignment ``||R_S - R_T||^2`` is bounded by

    (1 + eps) * ||R_S - R_TA||^2 + (1 + 1/eps) * ||R_TA - R_T||^2

for any ``eps > 0``, with the bound tightest at ``eps = b / a`` where
``a = ||R_S - R_TA||`` and ``b = ||R_TA - R_T||``. Each distillation level
minimises this bound with ``eps`` recomputed from detached norms every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, ShapeError
from .tensor import Tensor

EPS_MIN = 1e-3
EPS_MAX = 1e3
DEGENERATE_NORM = 1e-12
PROB_CLAMP = 1e-7


def young_rhs(x, y, eps: float) -> float:
    """(1 + eps)||x||^2 + (1 + 1/eps)||y||^2 as a plain float."""
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if xd.shape != yd.shape:
        raise ShapeError(f"young_rhs: shape mismatch {xd.shape} vs {yd.shape}")
    return (1.0 + eps) * float(np.vdot(xd, xd)) + (1.0 + 1.0 / eps) * float(np.vdot(yd, yd))


def epsilon_star(a: float, b: float) -> float:
    if a < 0 or b < 0 or math.isnan(a) or math.isnan(b):
        raise ShapeError(f"epsilon_star: norms must be non-negative, got a={a}, b={b}")
    if a < DEGENERATE_NORM:
        return EPS_MAX
    if b < DEGENERATE_NORM:
        return EPS_MIN
    return min(max(b / a, EPS_MIN), EPS_MAX)


def f_objective(a: float, b: float, eps: float) -> float:
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    return (1.0 + eps) * a * a + (1.0 + 1.0 / eps) * b * b


@dataclass
class DualPathTerms:
    a: float
    b: float
    eps_star: float
    loss_ta2s: Tensor
    loss_t2ta: Tensor
    weighted_total: Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ShapeError("loss weights must be non-negative")


@dataclass(frozen=True)
class LevelToggles:
    fld: bool = True
    dld: bool = True
    lld_base: bool = True
    lld_aux: bool = True


def _cells(x: Tensor) -> int:
    """Number of spatial cells (including any batch axis) of a C x H x W map."""
    shape = x.shape
    if len(shape) < 3:
        raise ShapeError(f"expected C x H x W representation, got {shape}")
    return int(np.prod(shape)) // shape[-3]


def cell_mse(x: Tensor, target: Tensor) -> Tensor:
    """Mean over cells of the per-cell squared L2 distance across channels."""
    if x.shape != target.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {target.shape}")
    return T.scale(T.sq_norm(T.sub(x, target)), 1.0 / _cells(x))


def dual_path_mse(r_s: Tensor, r_ta: Tensor, r_t: Tensor) -> DualPathTerms:
    if not (r_s.shape == r_ta.shape == r_t.shape):
        raise ShapeError(f"dual_path_mse: shapes differ {r_s.shape}, {r_ta.shape}, {r_t.shape}")
    a, b = T.stop_value((float(np.linalg.norm((r_s.data - r_ta.data).ravel())),
                         float(np.linalg.norm((r_ta.data - r_t.data).ravel()))))
    eps = epsilon_star(a, b)
    loss_t2ta = cell_mse(r_ta, T.detach(r_t))
    loss_ta2s = cell_mse(r_s, T.detach(r_ta))
    total = T.add(T.scale(loss_ta2s, 1.0 + eps), T.scale(loss_t2ta, 1.0 + 1.0 / eps))
    return DualPathTerms(a, b, eps, loss_ta2s, loss_t2ta, total)


def fld_loss(f_fus_t: Tensor, f_fus_ta: Tensor, f_cam_s: Tensor) -> DualPathTerms:
    return dual_path_mse(f_cam_s, f_fus_ta, f_fus_t)


def dld_loss(f_dec_t: Tensor, f_dec_ta: Tensor, f_dec_s: Tensor) -> DualPathTerms:
    return dual_path_mse(f_dec_s, f_dec_ta, f_dec_t)


def lld_base(l_tt: Tensor, l_tata: Tensor, l_ss: Tensor) -> DualPathTerms:
    return dual_path_mse(l_ss, l_tata, l_tt)


def direct_terms(r_s: Tensor, r_t: Tensor) -> DualPathTerms:
    """Single-path teacher-to-student MSE, used when no assistant exists.

    The result is shaped like :class:`DualPathTerms` with the whole loss on
    the student path at unit weight.
    """
    loss = cell_mse(r_s, T.detach(r_t))
    a = float(np.linalg.norm((r_s.data - r_t.data).ravel()))
    zero = Tensor(0.0)
    return DualPathTerms(a, 0.0, 0.0, loss, zero, loss)


def _prob(logits: Tensor) -> Tensor:
    return T.clamp(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bernoulli_kl(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean per-cell KL(Bern(sigmoid(p)) || Bern(sigmoid(q))); ``p`` is detached."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"bernoulli_kl: shape mismatch {p_logits.shape} vs {q_logits.shape}")
    p = np.clip(T.sigmoid(T.detach(p_logits)).data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    entropy_part = p * np.log(p) + (1.0 - p) * np.log(1.0 - p)
    q = _prob(q_logits)
    log_q = T.log(q)
    log_1mq = T.log(T.add(T.scale(q, -1.0), 1.0))
    cross = T.add(T.mul(log_q, Tensor(p)), T.mul(log_1mq, Tensor(1.0 - p)))
    kl = T.sub(Tensor(entropy_part), cross)
    return T.mean(kl)


def lld_aux(l_tt: Tensor, l_s_t: Tensor, l_tata: Optional[Tensor] = None,
            l_s_ta: Optional[Tensor] = None) -> Tensor:
    """Cross-head KL terms. With no assistant logits, only the teacher term remains."""
    out = bernoulli_kl(l_tt, l_s_t)
    if l_tata is not None:
        out = T.add(out, bernoulli_kl(l_tata, l_s_ta))
    return out


def seg_loss(logits: Tensor, labels, soft_dice: bool = False) -> Tensor:
    """Mean per-class per-pixel binary cross-entropy on sigmoid probabilities."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"seg_loss: shape mismatch {logits.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("seg_loss: labels must be binary")
    p = _prob(logits)
    pos = T.mul(T.log(p), Tensor(y))
    neg = T.mul(T.log(T.add(T.scale(p, -1.0), 1.0)), Tensor(1.0 - y))
    loss = T.scale(T.mean(T.add(pos, neg)), -1.0)
    if soft_dice:
        inter = T.sum(T.mul(p, Tensor(y)))
        denom = float(y.sum()) + 1.0
        union = T.add(T.sum(p), denom)
        dice = T.mul(T.scale(inter, 2.0), T.reciprocal(union))
        loss = T.add(loss, T.add(T.scale(dice, -1.0), 1.0))
    return loss


@dataclass
class LossBreakdown:
    seg: Tensor
    fld: Tensor
    dld: Tensor
    lld_base: Tensor
    lld_aux: Tensor
    total: Tensor
    fld_terms: Optional[DualPathTerms] = None
    dld_terms: Optional[DualPathTerms] = None
    lld_terms: Optional[DualPathTerms] = None

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("seg", "fld", "dld", "lld_base", "lld_aux", "total")}


def total_loss(bundle, labels, weights: LossWeights = LossWeights(),
               toggles: LevelToggles = LevelToggles(), use_ta: bool = True,
               soft_dice: bool = False) -> LossBreakdown:
    """Segmentation loss plus the weighted feature, decoded and logit terms.

    Every level is always evaluated so it can be logged; ``toggles`` and zero
    weights only decide what enters ``total``.
    """
    required = ["F_fus_T", "F_dec_T", "L_TT", "F_cam_S", "F_dec_S", "L_SS", "L_S_T"]
    if use_ta:
        required += ["F_fus_TA", "F_dec_TA", "L_TATA", "L_S_TA"]
    missing = [k for k in required if getattr(bundle, k, None) is None]
    if missing:
        raise ContractError(f"total_loss: bundle is missing {missing}")

    seg = seg_loss(bundle.L_SS, labels, soft_dice=soft_dice)
    if use_ta:
        fld = fld_loss(bundle.F_fus_T, bundle.F_fus_TA, bundle.F_cam_S)
        dld = dld_loss(bundle.F_dec_T, bundle.F_dec_TA, bundle.F_dec_S)
        base = lld_base(bundle.L_TT, bundle.L_TATA, bundle.L_SS)
        aux = lld_aux(bundle.L_TT, bundle.L_S_T, bundle.L_TATA, bundle.L_S_TA)
    else:
        fld = direct_terms(bundle.F_cam_S, bundle.F_fus_T)
        dld = direct_terms(bundle.F_dec_S, bundle.F_dec_T)
        base = direct_terms(bundle.L_SS, bundle.L_TT)
        aux = lld_aux(bundle.L_TT, bundle.L_S_T)

    total = seg
    if toggles.fld and weights.lambda1 != 0:
        total = T.add(total, T.scale(fld.weighted_total, weights.lambda1))
    if toggles.dld and weights.lambda2 != 0:
        total = T.add(total, T.scale(dld.weighted_total, weights.lambda2))
    if weights.lambda3 != 0:
        if toggles.lld_base:
            total = T.add(total, T.scale(base.weighted_total, weights.lambda3))
        if toggles.lld_aux:
            total = T.add(total, T.scale(aux, weights.lambda3))
    return LossBreakdown(seg, fld.weighted_total, dld.weighted_total, base.weighted_total,
                         aux, total, fld, dld, base)
