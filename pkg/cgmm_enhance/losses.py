"""
损失函数族及其解析梯度。

- mse_loss:        (1/FT) Σ |S − W X|²                        （L = 1）
- cg_nll:          (1/FT) Σ [log λ + |S − W X|² / λ]          （L = 1）
- cgmm_nll:        −(1/FT) Σ log Σ_l exp(Θ_l)
- cgmm_nll_beta:   −(1/FT) Σ log Σ_l exp(sg[λ_l^β_l] Θ_l)
- wta_loss:        top-K 假设的整句 MSE 平均

Θ_l = log Ω_l − log λ_l − |S − W_l X|² / λ_l，省略每个分量共有的 −log π，
与真实 −log p(S|X) 相差 F·T·log π / (F·T) = log π。

梯度针对掩码 W_l、方差 λ_l 与混合权重的 logits（Ω = softmax(logits)）。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import LossError
from .posterior import EPS_VAR, PosteriorParams

logger = logging.getLogger(__name__)


@dataclass
class LossGrad:
    """损失值及其对 (L, F, T) 形状头输出的梯度。"""
    value: float
    d_mask: np.ndarray
    d_var: np.ndarray
    d_logit: np.ndarray

    @classmethod
    def zeros_like(cls, p: PosteriorParams, value: float = 0.0) -> "LossGrad":
        shape = p.masks.shape
        return cls(value=value, d_mask=np.zeros(shape), d_var=np.zeros(shape), d_logit=np.zeros(shape))

    def __add__(self, other: "LossGrad") -> "LossGrad":
        return LossGrad(
            value=self.value + other.value,
            d_mask=self.d_mask + other.d_mask,
            d_var=self.d_var + other.d_var,
            d_logit=self.d_logit + other.d_logit,
        )

    def __mul__(self, scale: float) -> "LossGrad":
        return LossGrad(
            value=self.value * scale,
            d_mask=self.d_mask * scale,
            d_var=self.d_var * scale,
            d_logit=self.d_logit * scale,
        )

    __rmul__ = __mul__


@dataclass
class GradModConfig:
    """每个分量的 β_l ∈ [0, 1]；单个值广播到所有分量。"""
    betas: Sequence[float]

    def resolve(self, num_components: int) -> np.ndarray:
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 1:
            betas = np.full(num_components, betas[0])
        if betas.size != num_components:
            raise LossError(f"betas 数量 {betas.size} 与分量数 {num_components} 不符")
        if np.any(~((betas >= 0.0) & (betas <= 1.0))):
            raise LossError(f"β 必须位于 [0, 1]: {betas.tolist()}")
        return betas


def _residual(masks: np.ndarray, S: np.ndarray, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """残差能量 |S − W X|² 与 ∂|S − W X|²/∂W = 2Re{−S X̄ + W |X|²}。"""
    residual_sq = np.abs(S - masks * X) ** 2
    residual_grad = 2.0 * np.real(-S * np.conj(X) + masks * np.abs(X) ** 2)
    return residual_sq, residual_grad


def _check_single(p: PosteriorParams, name: str) -> None:
    if p.num_components != 1:
        raise LossError(f"{name} 要求 L = 1，得到 L = {p.num_components}")


def _check_shapes(p: PosteriorParams, S: np.ndarray, X: np.ndarray) -> None:
    if S.shape != X.shape or p.masks.shape[1:] != X.shape:
        raise LossError(f"形状不一致: masks {p.masks.shape}, S {S.shape}, X {X.shape}")


def mse_loss(p: PosteriorParams, S: np.ndarray, X: np.ndarray) -> Tuple[float, LossGrad]:
    """单掩码 MSE 损失；只对掩码有梯度。"""
    _check_single(p, "mse_loss")
    S, X = np.asarray(S), np.asarray(X)
    _check_shapes(p, S, X)
    n_bins = X.size
    residual_sq, residual_grad = _residual(p.masks, S, X)
    value = float(np.mean(residual_sq))
    grad = LossGrad.zeros_like(p, value)
    grad.d_mask = (1.0 / n_bins) * residual_grad
    return value, grad


def cg_nll(p: PosteriorParams, S: np.ndarray, X: np.ndarray) -> Tuple[float, LossGrad]:
    """Uni-modal complex Gaussian NLL (without the log π constant)."""
    _check_single(p, "cg_nll")
    S, X = np.asarray(S), np.asarray(X)
    _check_shapes(p, S, X)
    lam = p.variances
    if np.any(~(lam >= EPS_VAR)):
        raise LossError(f"方差低于下限 {EPS_VAR}")
    n_bins = X.size
    residual_sq, residual_grad = _residual(p.masks, S, X)
    value = float(np.mean(np.log(lam) + residual_sq / lam))
    grad = LossGrad.zeros_like(p, value)
    grad.d_mask = residual_grad / lam / n_bins
    grad.d_var = (lam - residual_sq) / lam ** 2 / n_bins
    return value, grad


def component_log_scores(p: PosteriorParams, S: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Θ_l = log Ω_l − log λ_l − |S − W_l X|² / λ_l，形状 (L, F, T)。"""
    residual_sq, _ = _residual(p.masks, np.asarray(S), np.asarray(X))
    with np.errstate(divide="ignore"):
        log_weights = np.log(p.weights)
    return log_weights - np.log(p.variances) - residual_sq / p.variances


def beta_scale(variances: np.ndarray, betas: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    """停止梯度因子 c_l = λ_l^β_l，返回与计算图无关的常量数组。"""
    variances = np.asarray(variances, dtype=np.float64)
    betas = GradModConfig(betas).resolve(variances.shape[0])
    exponent = betas.reshape((-1,) + (1,) * (variances.ndim - 1))
    return np.array(variances ** exponent, copy=True)


def mixture_nll(p: PosteriorParams, S: np.ndarray, X: np.ndarray,
                scale: Optional[np.ndarray] = None) -> Tuple[float, LossGrad]:
    """
    −(1/FT) Σ log Σ_l exp(c_l Θ_l)，c_l 视为常量。

    参数:
        p: 后验参数（权重已归一化，方差已截断）
        S: 纯净语音谱 (F, T)
        X: 带噪谱 (F, T)
        scale: 每个分量的常量因子 c_l，可广播到 (L, F, T)；None 表示 1

    返回:
        (value, LossGrad)；梯度为责任度 softmax(c Θ) 乘以 c ∇Θ
    """
    S, X = np.asarray(S), np.asarray(X)
    _check_shapes(p, S, X)
    lam = p.variances
    if np.any(~(lam >= EPS_VAR)):
        raise LossError(f"方差低于下限 {EPS_VAR}")
    n_bins = X.size
    residual_sq, residual_grad = _residual(p.masks, S, X)
    with np.errstate(divide="ignore"):
        log_weights = np.log(p.weights)
    theta = log_weights - np.log(lam) - residual_sq / lam
    c = np.ones_like(theta) if scale is None else np.broadcast_to(scale, theta.shape)
    scores = c * theta
    if np.any(np.all(np.isneginf(scores), axis=0)):
        raise LossError("某些时频点所有分量的得分均为 −∞")

    log_norm = logsumexp(scores, axis=0)
    value = float(-np.mean(log_norm))
    resp = softmax(scores, axis=0)

    # ∂loss/∂Θ_l = −r_l c_l / FT
    weight = resp * c * (1.0 / n_bins)
    d_mask = (weight / lam) * residual_grad
    d_var = weight * (lam - residual_sq) / lam ** 2
    g_log_weight = -weight
    d_logit = g_log_weight - p.weights * np.sum(g_log_weight, axis=0, keepdims=True)
    return value, LossGrad(value=value, d_mask=d_mask, d_var=d_var, d_logit=d_logit)


def cgmm_nll(p: PosteriorParams, S: np.ndarray, X: np.ndarray) -> Tuple[float, LossGrad]:
    """CGMM 负对数后验。"""
    return mixture_nll(p, S, X, scale=None)


def cgmm_nll_beta(p: PosteriorParams, S: np.ndarray, X: np.ndarray,
                  g: GradModConfig) -> Tuple[float, LossGrad]:
    """带停止梯度加权 λ_l^β_l 的 CGMM 负对数后验；β ≡ 0 时与 cgmm_nll 相同。"""
    betas = g.resolve(p.num_components)
    if np.all(betas == 0.0):
        return mixture_nll(p, S, X, scale=None)
    return mixture_nll(p, S, X, scale=beta_scale(p.variances, betas))


def wta_loss(masks: np.ndarray, S: np.ndarray, X: np.ndarray,
             K: int) -> Tuple[float, LossGrad, np.ndarray]:
    """
    Winner-takes-all loss over L mask hypotheses.

    Hypotheses are ranked by utterance-level MSE (ties by index); the value is
    the mean MSE of the K best and only winners receive gradient.

    Returns:
        (value, LossGrad, winner_ids) with winner_ids sorted by rank.
    """
    masks = np.asarray(masks, dtype=np.float64)
    S, X = np.asarray(S), np.asarray(X)
    n_hyp = masks.shape[0]
    if not 1 <= K <= n_hyp:
        raise LossError(f"K={K} 超出范围 [1, {n_hyp}]")
    if masks.shape[1:] != X.shape or S.shape != X.shape:
        raise LossError(f"形状不一致: masks {masks.shape}, S {S.shape}, X {X.shape}")
    n_bins = X.size
    residual_sq, residual_grad = _residual(masks, S, X)
    per_hyp = residual_sq.reshape(n_hyp, -1).mean(axis=1)
    order = np.argsort(per_hyp, kind="stable")
    winners = order[:K]
    value = float(np.mean(per_hyp[winners]))

    d_mask = np.zeros_like(masks)
    d_mask[winners] = residual_grad[winners] / (K * n_bins)
    zeros = np.zeros_like(masks)
    grad = LossGrad(value=value, d_mask=d_mask, d_var=zeros, d_logit=zeros.copy())
    return value, grad, winners
