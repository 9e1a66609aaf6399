"""
纯净语音的闭式 CGMM 后验。

语音与噪声先验都是零均值复高斯混合；每个 (i, j) 分量对给出一个 Wiener 增益
与后验方差，后验混合权重为按证据加权的责任度。后验均值是 Wiener 估计的加权和，
后验方差按全方差定律拆分为偶然（aleatoric）与认知（epistemic）两部分。

所有数组的分量轴在最前：masks / variances / weights 形状为 (L, F, T)。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from .dsp import ComplexSpectrogram
from .exceptions import PosteriorError

logger = logging.getLogger(__name__)

EPS_VAR = 1e-6
WEIGHT_TOL = 1e-9
PRIOR_WEIGHT_TOL = 1e-12

SpectrumLike = Union[ComplexSpectrogram, np.ndarray, complex]


def _coefficients(X: SpectrumLike) -> np.ndarray:
    if isinstance(X, ComplexSpectrogram):
        return X.coefficients
    return np.asarray(X, dtype=np.complex128)


@dataclass
class PriorCGMM:
    """语音与噪声的零均值复高斯混合先验。"""
    speech_vars: np.ndarray     # (I, ...) 可广播到 (I, F, T)
    noise_vars: np.ndarray      # (J, ...)
    speech_weights: np.ndarray  # (I,)
    noise_weights: np.ndarray   # (J,)

    def validate(self) -> None:
        for name in ("speech_vars", "noise_vars", "speech_weights", "noise_weights"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise PosteriorError(f"{name} 含非有限值")
            setattr(self, name, arr)
        if self.speech_vars.shape[0] != self.speech_weights.shape[0]:
            raise PosteriorError("speech_vars 与 speech_weights 的分量数不一致")
        if self.noise_vars.shape[0] != self.noise_weights.shape[0]:
            raise PosteriorError("noise_vars 与 noise_weights 的分量数不一致")
        if np.any(self.speech_vars <= 0) or np.any(self.noise_vars <= 0):
            raise PosteriorError("先验方差必须为正")
        for name, w in (("speech_weights", self.speech_weights), ("noise_weights", self.noise_weights)):
            if w.ndim != 1 or w.size == 0:
                raise PosteriorError(f"{name} 必须是非空向量")
            if np.any(w < 0):
                raise PosteriorError(f"{name} 含负值")
            if abs(w.sum() - 1.0) > PRIOR_WEIGHT_TOL:
                raise PosteriorError(f"{name} 之和为 {w.sum()!r}，应为 1")


@dataclass
class PosteriorParams:
    """每个时频点的后验混合参数：L 个 Wiener 掩码、方差与权重。"""
    masks: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    @property
    def num_components(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.masks.shape[1:]

    def validate(self) -> "PosteriorParams":
        if not (self.masks.shape == self.variances.shape == self.weights.shape):
            raise PosteriorError(
                f"masks/variances/weights 形状不一致: {self.masks.shape}, "
                f"{self.variances.shape}, {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.masks)):
            raise PosteriorError("masks 含非有限值")
        if not np.all(np.isfinite(self.variances)) or np.any(self.variances < EPS_VAR):
            raise PosteriorError(f"variances 必须有限且不小于 {EPS_VAR}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise PosteriorError("weights 必须非负且有限")
        total = self.weights.sum(axis=0)
        if np.max(np.abs(total - 1.0), initial=0.0) > WEIGHT_TOL:
            raise PosteriorError("每个时频点的 weights 之和必须为 1")
        return self


@dataclass
class UncertaintyMaps:
    """后验均值估计与偶然/认知/总不确定性（功率）。"""
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray


def wiener_pair(speech_var, noise_var) -> Tuple[np.ndarray, np.ndarray]:
    """
    一对语音/噪声方差的 Wiener 增益与后验方差。

    W = σ²_s / (σ²_s + σ²_n)，λ = σ²_s σ²_n / (σ²_s + σ²_n)；
    两个方差先被截断到 EPS_VAR。
    """
    s = np.asarray(speech_var, dtype=np.float64)
    n = np.asarray(noise_var, dtype=np.float64)
    if np.any(~(s > 0)) or np.any(~(n > 0)):
        raise PosteriorError("Wiener 对的方差必须为正")
    s = np.maximum(s, EPS_VAR)
    n = np.maximum(n, EPS_VAR)
    denom = s + n
    return s / denom, s * n / denom


def posterior_from_priors(prior: PriorCGMM, X: SpectrumLike) -> PosteriorParams:
    """
    由 CGMM 先验与带噪观测得到闭式后验参数。

    分量按 l = i * J + j 展平。权重 Ω(i,j|X) ∝ Ω(i) Ω(j) N_C(X; 0, σ²_i + σ²_j)，
    在对数域做 max-subtraction 归一化。
    """
    prior.validate()
    x = _coefficients(X)
    n_speech = prior.speech_weights.shape[0]
    n_noise = prior.noise_weights.shape[0]
    target_shape = np.broadcast(
        x, np.empty(prior.speech_vars.shape[1:]), np.empty(prior.noise_vars.shape[1:])
    ).shape

    def expand(vars_: np.ndarray) -> np.ndarray:
        per_comp = vars_.reshape(vars_.shape + (1,) * (len(target_shape) + 1 - vars_.ndim))
        return np.broadcast_to(per_comp, (vars_.shape[0],) + target_shape)

    speech = np.maximum(expand(prior.speech_vars), EPS_VAR)
    noise = np.maximum(expand(prior.noise_vars), EPS_VAR)
    power = np.abs(np.broadcast_to(x, target_shape)) ** 2

    masks, variances, log_resp = [], [], []
    with np.errstate(divide="ignore"):
        log_ws = np.log(prior.speech_weights)
        log_wn = np.log(prior.noise_weights)
    for i in range(n_speech):
        for j in range(n_noise):
            mask, lam = wiener_pair(speech[i], noise[j])
            evidence_var = speech[i] + noise[j]
            masks.append(mask)
            variances.append(np.maximum(lam, EPS_VAR))
            log_resp.append(log_ws[i] + log_wn[j] - np.log(np.pi * evidence_var) - power / evidence_var)

    log_resp = np.stack(log_resp)
    if np.any(np.all(np.isneginf(log_resp), axis=0)):
        raise PosteriorError("退化先验：某些时频点所有分量的证据均为零")
    weights = softmax(log_resp, axis=0)
    return PosteriorParams(
        masks=np.stack(masks),
        variances=np.stack(variances),
        weights=weights,
    ).validate()


def posterior_mean(p: PosteriorParams, X: SpectrumLike) -> np.ndarray:
    """后验均值 E(S|X) = Σ_l Ω(l|X) W_l X。"""
    x = _coefficients(X)
    return np.sum(p.weights * p.masks, axis=0) * x


def decompose_uncertainty(p: PosteriorParams, X: SpectrumLike) -> UncertaintyMaps:
    """
    按全方差定律分解后验方差。

    aleatoric = Σ_l Ω_l λ_l；epistemic = Σ_l Ω_l |W_l X − E(S|X)|²；
    total 为二者之和。
    """
    x = _coefficients(X)
    mean = posterior_mean(p, x)
    aleatoric = np.sum(p.weights * p.variances, axis=0)
    spread = np.abs(p.masks * x - mean) ** 2
    epistemic = np.sum(p.weights * spread, axis=0)
    return UncertaintyMaps(
        mean=mean,
        aleatoric=aleatoric,
        epistemic=epistemic,
        total=aleatoric + epistemic,
    )


def posterior_density(p: PosteriorParams, X_ft: complex, S: np.ndarray) -> np.ndarray:
    """
    单个时频点的后验混合密度在复数点 S 处的取值。

    ``p`` 的各数组形状为 (L,)（或 (L, 1, ..., 1)）。
    """
    masks = np.asarray(p.masks, dtype=np.float64).reshape(-1)
    lams = np.asarray(p.variances, dtype=np.float64).reshape(-1)
    weights = np.asarray(p.weights, dtype=np.float64).reshape(-1)
    s = np.asarray(S, dtype=np.complex128)
    centers = masks * complex(X_ft)
    expand = (slice(None),) + (None,) * s.ndim
    log_terms = (np.log(weights)[expand] - np.log(np.pi * lams)[expand]
                 - np.abs(s[None, ...] - centers[expand]) ** 2 / lams[expand])
    return np.exp(logsumexp(log_terms, axis=0))


def oracle_posterior(S: np.ndarray, N: np.ndarray) -> PosteriorParams:
    """由纯净语音与噪声真值构造的单分量 Wiener 后验（上界参考）。"""
    s_pow = np.maximum(np.abs(np.asarray(S)) ** 2, EPS_VAR)
    n_pow = np.maximum(np.abs(np.asarray(N)) ** 2, EPS_VAR)
    mask, lam = wiener_pair(s_pow, n_pow)
    return PosteriorParams(
        masks=mask[None],
        variances=np.maximum(lam, EPS_VAR)[None],
        weights=np.ones((1,) + mask.shape),
    ).validate()


def write_uncertainty_csv(path: Union[str, Path], maps: UncertaintyMaps) -> None:
    """导出每个时频点的后验均值与不确定性：f, t, re_mean, im_mean, aleatoric, epistemic。"""
    n_freq, n_frames = maps.mean.shape
    f_idx, t_idx = np.meshgrid(np.arange(n_freq), np.arange(n_frames), indexing="ij")
    frame = pd.DataFrame({
        "f": f_idx.ravel(),
        "t": t_idx.ravel(),
        "re_mean": maps.mean.real.ravel(),
        "im_mean": maps.mean.imag.ravel(),
        "aleatoric": maps.aleatoric.ravel(),
        "epistemic": maps.epistemic.ravel(),
    })
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(target, index=False, float_format="%.17g")
    logger.debug(f"不确定性图已写入 {target}（{len(frame)} 行）")
