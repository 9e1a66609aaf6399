"""
网络检查点的读写。

文件格式：第一行为 JSON 文件头（网络配置、模型、种子、轮次、损失、
constant_variance、布局摘要与完整配置回显），其后为小端 float64 的 theta。
写入为原子操作（临时文件 + rename）。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .exceptions import CheckpointError, NetworkError
from .net import NetConfig, NetParams, build_layout, layout_digest
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cgmm-enhance-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """加载后的检查点。"""
    params: NetParams
    net_config: NetConfig
    model: str
    seed: int
    epoch: int
    loss: Optional[float]
    constant_variance: bool = False
    config: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], params: NetParams, net_config: NetConfig, *,
                    model: str, seed: int, epoch: int, loss: Optional[float],
                    constant_variance: bool = False,
                    config: Optional[Dict[str, Any]] = None) -> Path:
    """
    保存检查点。

    参数:
        path: 目标文件
        params: 网络参数
        net_config: 网络结构
        model: 模型名（wf / cgmm1 / ...）
        seed: 初始化种子
        epoch: 最佳轮次
        loss: 该轮验证损失
        constant_variance: 是否以 λ ≡ 1 训练
        config: 完整扁平配置回显

    返回:
        写入的路径
    """
    if not params.is_finite():
        raise CheckpointError("拒绝保存含非有限值的参数")
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net": net_config.to_dict(),
        "model": model,
        "seed": int(seed),
        "epoch": int(epoch),
        "loss": None if loss is None else float(loss),
        "constant_variance": bool(constant_variance),
        "layout_digest": params.layout_digest(),
        "n_params": params.size,
        "config": config or {},
    }
    payload = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    payload += params.theta.astype("<f8").tobytes()
    target = Path(path)
    atomic_write_bytes(target, payload)
    logger.info(f"检查点已保存: {target} (epoch={epoch}, loss={loss})")
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """加载并校验检查点。"""
    target = Path(path)
    if not target.is_file():
        raise CheckpointError(f"检查点不存在: {target}")
    with open(target, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"检查点文件头损坏 {target}: {e}") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{target} 不是 cgmm-enhance 检查点")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"不支持的检查点版本: {header.get('version')}")

    try:
        net_config = NetConfig.from_dict(header["net"])
    except (KeyError, NetworkError) as e:
        raise CheckpointError(f"检查点网络配置无效 {target}: {e}") from e
    layout = build_layout(net_config)
    if layout_digest(layout) != header.get("layout_digest"):
        raise CheckpointError(f"检查点布局摘要与网络配置不一致: {target}")
    n_params = sum(slot.size for slot in layout)
    if len(payload) != n_params * 8:
        raise CheckpointError(
            f"检查点 {target} 参数区长度 {len(payload)} 与期望的 {n_params * 8} 字节不符"
        )
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(theta)):
        raise CheckpointError(f"检查点 {target} 含非有限参数")

    logger.debug(f"已加载检查点 {target}: model={header.get('model')}, epoch={header.get('epoch')}")
    return Checkpoint(
        params=NetParams(theta=theta, layout=layout),
        net_config=net_config,
        model=str(header.get("model", "")),
        seed=int(header.get("seed", 0)),
        epoch=int(header.get("epoch", 0)),
        loss=header.get("loss"),
        constant_variance=bool(header.get("constant_variance", False)),
        config=header.get("config", {}),
    )
