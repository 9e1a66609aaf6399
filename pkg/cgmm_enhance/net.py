"""
紧凑的掩码估计网络。

逐帧 MLP：输入为 ±context 帧的对数功率谱特征，隐藏层为 Leaky ReLU，
输出三个独立的仿射头：

- mask:  L·F 个 logit，W_l = sigmoid(logit) ∈ (0, 1)
- var:   L·F 个 logit，λ_l = EPS_VAR + exp(clip(logit, ±14))
- mix:   L·F 个 logit，Ω = softmax(logits, 分量轴)

反向传播手工推导，全部参数平铺在一个 float64 向量 theta 中，
由 layout 描述每个张量的偏移与形状。
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from .exceptions import NetworkError
from .losses import LossGrad
from .posterior import EPS_VAR, PosteriorParams, SpectrumLike, _coefficients

logger = logging.getLogger(__name__)

VAR_LOGIT_CLIP = 14.0
HEADS = ("mask", "var", "mix")
# var / mix 头的初始权重缩放，使初始 λ ≈ 1、权重近似均匀
SMALL_HEAD_SCALE = 0.01


@dataclass
class NetConfig:
    """网络结构描述。"""
    n_freq: int
    num_components: int
    context: int = 3
    hidden_dims: Tuple[int, ...] = (128, 128)
    leaky_slope: float = 0.2
    feature_norm: str = "utterance"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.num_components < 1:
            raise NetworkError(f"分量数 L 必须 >= 1，得到 {self.num_components}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise NetworkError(f"hidden_dims 必须非空且为正: {self.hidden_dims}")
        if self.n_freq < 1 or self.context < 0:
            raise NetworkError(f"n_freq={self.n_freq} / context={self.context} 无效")
        if self.feature_norm not in ("utterance", "none"):
            raise NetworkError(f"未知的 feature_norm: {self.feature_norm}")

    @property
    def input_dim(self) -> int:
        return self.n_freq * (2 * self.context + 1)

    @property
    def head_dim(self) -> int:
        return self.num_components * self.n_freq

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["hidden_dims"] = list(self.hidden_dims)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise NetworkError(f"网络配置字段无效: {e}") from e


@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(cfg: NetConfig) -> Tuple[ParamSlot, ...]:
    """按 body.0 … body.n、mask、var、mix 的顺序排布参数。"""
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        shapes.append((f"body.{i}.weight", (fan_in, width)))
        shapes.append((f"body.{i}.bias", (width,)))
        fan_in = width
    for head in HEADS:
        shapes.append((f"{head}.weight", (fan_in, cfg.head_dim)))
        shapes.append((f"{head}.bias", (cfg.head_dim,)))

    slots = []
    offset = 0
    for name, shape in shapes:
        slot = ParamSlot(name, offset, shape)
        slots.append(slot)
        offset += slot.size
    return tuple(slots)


@dataclass
class NetParams:
    """平铺参数向量与其布局。"""
    theta: np.ndarray
    layout: Tuple[ParamSlot, ...]

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expected = sum(slot.size for slot in self.layout)
        if self.theta.shape != (expected,):
            raise NetworkError(f"theta 形状 {self.theta.shape} 与布局大小 {expected} 不符")

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def slot(self, name: str) -> ParamSlot:
        for slot in self.layout:
            if slot.name == name:
                return slot
        raise NetworkError(f"未知参数: {name}")

    def view(self, name: str) -> np.ndarray:
        """theta 中某个张量的可写视图。"""
        slot = self.slot(name)
        return self.theta[slot.offset:slot.offset + slot.size].reshape(slot.shape)

    def copy(self) -> "NetParams":
        return NetParams(theta=self.theta.copy(), layout=self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))

    def layout_digest(self) -> str:
        return layout_digest(self.layout)


def layout_digest(layout: Sequence[ParamSlot]) -> str:
    text = json.dumps([[s.name, s.offset, list(s.shape)] for s in layout])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class HeadOutput:
    """三个头的原始 logit，形状 (L, F, T)。"""
    mask_logits: np.ndarray
    var_logits: np.ndarray
    weight_logits: np.ndarray


@dataclass
class Tape:
    """forward 保留给 backward 的中间量。"""
    layout: Tuple[ParamSlot, ...]
    theta: np.ndarray
    cfg: NetConfig
    activations: List[np.ndarray]      # 每层输入，最后一个为头的输入
    pre_activations: List[np.ndarray]  # 每个隐藏层的仿射输出
    head: HeadOutput
    masks: np.ndarray
    variances: np.ndarray
    n_frames: int = field(default=0)


def input_features(cfg: NetConfig, X: SpectrumLike) -> np.ndarray:
    """
    逐帧输入特征，形状 (T, F·(2c+1))。

    特征为 log(|X|² + EPS_VAR)；utterance 归一化时减去整句均值并除以标准差。
    时间轴两端按边缘值延拓 context 帧。
    """
    x = _coefficients(X)
    if x.ndim != 2 or x.shape[0] != cfg.n_freq:
        raise NetworkError(f"输入谱形状 {x.shape} 与 n_freq={cfg.n_freq} 不符")
    feats = np.log(np.abs(x) ** 2 + EPS_VAR)
    if cfg.feature_norm == "utterance":
        std = feats.std()
        feats = (feats - feats.mean()) / (std if std > 0 else 1.0)
    n_frames = x.shape[1]
    c = cfg.context
    padded = np.pad(feats, ((0, 0), (c, c)), mode="edge")
    stacked = np.concatenate([padded[:, k:k + n_frames] for k in range(2 * c + 1)], axis=0)
    return stacked.T


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _to_bins(cols: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """(T, L·F) -> (L, F, T)。"""
    n_frames = cols.shape[0]
    return cols.reshape(n_frames, cfg.num_components, cfg.n_freq).transpose(1, 2, 0)


def _to_cols(bins: np.ndarray) -> np.ndarray:
    """(L, F, T) -> (T, L·F)。"""
    n_comp, n_freq, n_frames = bins.shape
    return bins.transpose(2, 0, 1).reshape(n_frames, n_comp * n_freq)


def forward(params: NetParams, cfg: NetConfig, X: SpectrumLike) -> Tuple[PosteriorParams, Tape]:
    """
    前向计算。

    参数:
        params: 网络参数
        cfg: 网络结构
        X: 带噪谱 (F, T)

    返回:
        (PosteriorParams, Tape)
    """
    if params.layout != build_layout(cfg):
        raise NetworkError("参数布局与网络配置不一致")
    h = input_features(cfg, X)
    activations = [h]
    pre_activations = []
    for i in range(len(cfg.hidden_dims)):
        z = h @ params.view(f"body.{i}.weight") + params.view(f"body.{i}.bias")
        h = _leaky(z, cfg.leaky_slope)
        pre_activations.append(z)
        activations.append(h)

    logits = {
        head: _to_bins(h @ params.view(f"{head}.weight") + params.view(f"{head}.bias"), cfg)
        for head in HEADS
    }
    head = HeadOutput(
        mask_logits=logits["mask"],
        var_logits=logits["var"],
        weight_logits=logits["mix"],
    )
    masks = expit(head.mask_logits)
    variances = EPS_VAR + np.exp(np.clip(head.var_logits, -VAR_LOGIT_CLIP, VAR_LOGIT_CLIP))
    weights = softmax(head.weight_logits, axis=0)
    tape = Tape(
        layout=params.layout,
        theta=params.theta.copy(),
        cfg=cfg,
        activations=activations,
        pre_activations=pre_activations,
        head=head,
        masks=masks,
        variances=variances,
        n_frames=h.shape[0],
    )
    return PosteriorParams(masks=masks, variances=variances, weights=weights), tape


def backward(tape: Tape, upstream: LossGrad, params: Optional[NetParams] = None) -> np.ndarray:
    """
    反向传播：把对头输出的梯度链到 theta。

    参数:
        tape: forward 的记录
        upstream: 对 masks / variances / 权重 logits 的梯度
        params: 可选；给出时校验与 tape 对应的是同一组参数

    返回:
        与 theta 对齐的梯度向量
    """
    cfg = tape.cfg
    if params is not None:
        if params.layout != tape.layout or not np.array_equal(params.theta, tape.theta):
            raise NetworkError("tape 与参数不匹配（参数在 forward 之后被修改或来自另一个网络）")
    expected = (cfg.num_components, cfg.n_freq, tape.n_frames)
    for name in ("d_mask", "d_var", "d_logit"):
        if np.shape(getattr(upstream, name)) != expected:
            raise NetworkError(f"上游梯度 {name} 形状 {np.shape(getattr(upstream, name))}，应为 {expected}")

    var_logits = tape.head.var_logits
    inside = (var_logits > -VAR_LOGIT_CLIP) & (var_logits < VAR_LOGIT_CLIP)
    head_grads = {
        "mask": upstream.d_mask * tape.masks * (1.0 - tape.masks),
        "var": upstream.d_var * (tape.variances - EPS_VAR) * inside,
        "mix": upstream.d_logit,
    }

    grad = NetParams(theta=np.zeros_like(tape.theta), layout=tape.layout)
    theta = NetParams(theta=tape.theta, layout=tape.layout)
    h = tape.activations[-1]
    dh = np.zeros_like(h)
    for head in HEADS:
        g = _to_cols(head_grads[head])
        grad.view(f"{head}.weight")[...] = h.T @ g
        grad.view(f"{head}.bias")[...] = g.sum(axis=0)
        dh += g @ theta.view(f"{head}.weight").T

    for i in reversed(range(len(cfg.hidden_dims))):
        z = tape.pre_activations[i]
        dz = dh * np.where(z > 0, 1.0, cfg.leaky_slope)
        a_prev = tape.activations[i]
        grad.view(f"body.{i}.weight")[...] = a_prev.T @ dz
        grad.view(f"body.{i}.bias")[...] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ theta.view(f"body.{i}.weight").T
    return grad.theta


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    """
    确定性初始化。

    隐藏层为 Leaky ReLU 的 Kaiming 均匀分布，头为 ±1/sqrt(fan_in) 均匀分布，
    var / mix 头再缩放 SMALL_HEAD_SCALE；所有偏置为零，因此初始 λ ≈ 1。
    """
    layout = build_layout(cfg)
    params = NetParams(theta=np.zeros(sum(s.size for s in layout)), layout=layout)
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))
    for slot in layout:
        if not slot.name.endswith(".weight"):
            continue
        fan_in = slot.shape[0]
        if slot.name.startswith("body."):
            bound = gain * np.sqrt(3.0 / fan_in)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            if not slot.name.startswith("mask."):
                bound *= SMALL_HEAD_SCALE
        params.view(slot.name)[...] = rng.uniform(-bound, bound, size=slot.shape)
    return params


def head_columns(cfg: NetConfig, component: int) -> np.ndarray:
    """分量 l 在每个头输出中的列号。"""
    if not 0 <= component < cfg.num_components:
        raise NetworkError(f"分量 {component} 超出范围 [0, {cfg.num_components})")
    return np.arange(component * cfg.n_freq, (component + 1) * cfg.n_freq)


def transfer_params(src: NetParams, dst: NetParams, heads: Sequence[str] = ("mask",),
                    include_body: bool = True) -> NetParams:
    """
    把 src 的隐藏层和指定头复制到 dst 的副本中。

    两者对应张量的形状必须一致；其余张量保持 dst 的值。
    """
    for head in heads:
        if head not in HEADS:
            raise NetworkError(f"未知的头: {head}")
    out = dst.copy()
    copied = 0
    for slot in dst.layout:
        prefix = slot.name.split(".", 1)[0]
        wanted = (include_body and prefix == "body") or prefix in heads
        if not wanted:
            continue
        source = src.view(slot.name)
        if source.shape != slot.shape:
            raise NetworkError(f"{slot.name} 形状不兼容: {source.shape} vs {slot.shape}")
        out.view(slot.name)[...] = source
        copied += 1
    logger.debug(f"已复制 {copied} 个参数张量（heads={list(heads)}, body={include_body}）")
    return out
