"""
优化器与学习率调度。

- adam_step: Adam（β₁=0.9, β₂=0.999, ε=1e-8）加解耦权重衰减
- clip_grad_norm: 全局范数裁剪
- PlateauScheduler: 验证损失连续若干轮未改善时学习率减半
- EarlyStopping: 连续若干轮未改善时停止
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .exceptions import NetworkError, NumericalAbortError

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """一阶、二阶矩估计与步数。"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, weight_decay: float = 0.0) -> Tuple[np.ndarray, AdamState]:
    """
    一步 Adam 更新（权重衰减与梯度解耦，按 lr · weight_decay · θ 收缩）。

    参数:
        params: 参数向量
        grads: 同形状的梯度
        state: 上一步的状态
        lr: 学习率
        weight_decay: 解耦权重衰减系数

    返回:
        (新参数, 新状态)；输入不被修改
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise NetworkError(f"形状不一致: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NumericalAbortError(f"梯度含 {bad} 个非有限值（step={state.step + 1}）")

    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads ** 2
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if weight_decay:
        updated = updated - lr * weight_decay * params
    return updated, AdamState(m=m, v=v, step=step)


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    """全局范数超过 max_norm 时等比缩放；返回 (梯度, 裁剪前范数)。"""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


@dataclass
class PlateauScheduler:
    """
    验证损失连续 patience 轮未改善（严格下降超过 tol）时学习率乘以 factor。

    每次减半后计数器清零。
    """
    lr: float
    patience: int = 3
    factor: float = 0.5
    tol: float = 1e-6
    best: float = field(default=math.inf)
    bad_epochs: int = 0
    num_reductions: int = 0

    def step(self, val_loss: float) -> bool:
        """记录一轮验证损失；返回本轮是否降低了学习率。"""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            old = self.lr
            self.lr *= self.factor
            self.bad_epochs = 0
            self.num_reductions += 1
            logger.info(f"验证损失 {self.patience} 轮未改善，学习率 {old:.3g} -> {self.lr:.3g}")
            return True
        return False


@dataclass
class EarlyStopping:
    """连续 patience 轮未改善时触发；记录最佳轮次。"""
    patience: int = 10
    tol: float = 1e-6
    best: float = field(default=math.inf)
    best_epoch: Optional[int] = None
    bad_epochs: int = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """返回本轮是否为新的最佳；应否停止见 should_stop。"""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
