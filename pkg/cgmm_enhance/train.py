"""
训练流程。

- train_baseline: 单掩码 Wiener 基线（MSE）
- train_cgmm: CGMM 负对数后验（带 β 停止梯度加权），可选常数方差与 WTA 初始化
- pretrain_wta: 只训练掩码头的 winner-takes-all 预训练，K 按轮次减半
- train_model: 按配置键 model 分派（wf / cgmm1 / cgmm4 / cgmm4-cons / cgmm4-pre）

每次运行写一个 RunManifest（JSON lines）与最佳检查点；
给定相同配置与种子，数据顺序、归约顺序与初始化全部确定。
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, TrainConfig
from .data import Manifest, Utterance, load_split
from .exceptions import ConfigurationError, NumericalAbortError
from .losses import GradModConfig, cgmm_nll_beta, mse_loss, wta_loss
from .manifest import RunManifest
from .net import NetConfig, NetParams, backward, forward, init_params, transfer_params
from .optimizer import AdamState, EarlyStopping, PlateauScheduler, adam_step, clip_grad_norm
from .posterior import PosteriorParams
from .utils import batch_indices, sha256_arrays

logger = logging.getLogger(__name__)


@dataclass
class TrainingData:
    """训练集与验证集（按清单顺序）。"""
    train: List[Utterance]
    validation: List[Utterance]

    def digest(self) -> str:
        """数据集哈希：按顺序对所有带噪/纯净谱做 sha256。"""
        arrays = []
        for utt in list(self.train) + list(self.validation):
            arrays.append(utt.noisy.coefficients)
            arrays.append(utt.clean.coefficients)
        return sha256_arrays(arrays)


@dataclass(frozen=True)
class Objective:
    """训练目标：mse / cgmm / wta。"""
    kind: str
    constant_variance: bool = False
    betas: Tuple[float, ...] = (0.0,)


@dataclass
class TrainResult:
    """一次训练运行的结果。"""
    checkpoint: Path
    manifest: Path
    best_epoch: int
    best_val_loss: float
    history: List[Dict[str, Any]] = field(default_factory=list)
    params: Optional[NetParams] = None
    net_config: Optional[NetConfig] = None


def net_config_for(config: Config, num_components: int) -> NetConfig:
    n = config.net
    return NetConfig(
        n_freq=config.dsp.n_freq,
        num_components=num_components,
        context=n.context,
        hidden_dims=n.hidden_dims,
        leaky_slope=n.leaky_slope,
        feature_norm=n.feature_norm,
    )


def load_training_data(config: Config) -> TrainingData:
    """从 config.data.data_dir 的清单读取 train / val 划分。"""
    manifest = Manifest.load(config.data.data_dir)
    return TrainingData(
        train=load_split(manifest, "train", dsp_cfg=config.dsp),
        validation=load_split(manifest, "val", dsp_cfg=config.dsp),
    )


def wta_k_schedule(num_components: int, epoch: int, halve_every: int) -> int:
    """第 epoch 轮（从 1 开始）的赢家数：从 L 开始每 halve_every 轮减半，最少为 1。"""
    return max(1, num_components >> ((epoch - 1) // halve_every))


def wta_total_epochs(tc: TrainConfig, lr0: Optional[float] = None) -> int:
    """恒定学习率阶段加上减半阶段（直到再减半就低于 lr_floor）的总轮数。"""
    lr0 = tc.lr_init if lr0 is None else lr0
    halvings = 0
    while lr0 * 0.5 ** (halvings + 1) >= tc.lr_floor:
        halvings += 1
    return tc.wta_epochs + halvings * tc.wta_lr_halve_every


def wta_learning_rate(epoch: int, tc: TrainConfig, lr0: Optional[float] = None) -> float:
    """WTA 阶段第 epoch 轮的学习率。"""
    lr0 = tc.lr_init if lr0 is None else lr0
    if epoch <= tc.wta_epochs:
        return lr0
    halvings = -(-(epoch - tc.wta_epochs) // tc.wta_lr_halve_every)
    return lr0 * 0.5 ** halvings


def clipping_enabled(tc: TrainConfig, objective: Objective) -> bool:
    if tc.grad_clip == "on":
        return True
    if tc.grad_clip == "off":
        return False
    return objective.kind == "cgmm" and not objective.constant_variance


def utterance_loss(params: NetParams, net_cfg: NetConfig, utt: Utterance, objective: Objective,
                   k: int = 1, with_grad: bool = True) -> Tuple[float, Optional[np.ndarray], Optional[np.ndarray]]:
    """
    单条语句的损失与对 theta 的梯度。

    返回:
        (loss, grad 或 None, WTA 赢家编号或 None)
    """
    p, tape = forward(params, net_cfg, utt.noisy)
    S = utt.clean.coefficients
    X = utt.noisy.coefficients
    winners = None
    if objective.constant_variance:
        p = PosteriorParams(masks=p.masks, variances=np.ones_like(p.variances), weights=p.weights)

    if objective.kind == "mse":
        value, grad = mse_loss(p, S, X)
    elif objective.kind == "cgmm":
        value, grad = cgmm_nll_beta(p, S, X, GradModConfig(objective.betas))
        if objective.constant_variance:
            grad.d_var = np.zeros_like(grad.d_var)
    elif objective.kind == "wta":
        value, grad, winners = wta_loss(p.masks, S, X, k)
    else:
        raise ConfigurationError(f"未知训练目标: {objective.kind}")

    if not with_grad:
        return value, None, winners
    return value, backward(tape, grad), winners


def evaluate_loss(params: NetParams, net_cfg: NetConfig, utterances: Sequence[Utterance],
                  objective: Objective, k: int = 1) -> float:
    """一组语句的平均损失（按顺序累加）。"""
    total = 0.0
    for utt in utterances:
        value, _, _ = utterance_loss(params, net_cfg, utt, objective, k=k, with_grad=False)
        total += value
    return total / len(utterances)


def hypothesis_diversity(params: NetParams, net_cfg: NetConfig, utterances: Sequence[Utterance]) -> float:
    """各分量掩码两两之间的平均绝对差，先在时频点上平均，再在语句上平均。"""
    n_comp = net_cfg.num_components
    if n_comp < 2 or not utterances:
        return 0.0
    per_utt = []
    for utt in utterances:
        p, _ = forward(params, net_cfg, utt.noisy)
        distances = [np.mean(np.abs(p.masks[a] - p.masks[b]))
                     for a in range(n_comp) for b in range(a + 1, n_comp)]
        per_utt.append(float(np.mean(distances)))
    return float(np.mean(per_utt))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch_step(params: NetParams, net_cfg: NetConfig, batch: List[Utterance], objective: Objective,
                k: int) -> Tuple[float, np.ndarray, List[List[int]]]:
    """批内按固定顺序累加梯度，返回 (平均损失, 平均梯度, 每条语句的赢家)。"""
    grad_sum = np.zeros_like(params.theta)
    loss_sum = 0.0
    winners = []
    for utt in batch:
        value, grad, won = utterance_loss(params, net_cfg, utt, objective, k=k)
        loss_sum += value
        grad_sum += grad
        if won is not None:
            winners.append([int(w) for w in won])
    n = len(batch)
    return loss_sum / n, grad_sum / n, winners


class _Run:
    """一次训练运行的共用部分：清单、检查点与数值中止。"""

    def __init__(self, config: Config, data: TrainingData, net_cfg: NetConfig, name: str,
                 out_dir: Optional[Union[str, Path]], constant_variance: bool):
        self.config = config
        self.data = data
        self.net_cfg = net_cfg
        self.name = name
        self.constant_variance = constant_variance
        self.out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_path = self.out_dir / f"{name}.ckpt"
        self.manifest = RunManifest(self.out_dir / f"{name}.manifest.jsonl")
        self.last_checkpoint: Optional[Path] = None

    def start(self, **fields: Any) -> None:
        if not self.data.train or not self.data.validation:
            raise ConfigurationError("训练集与验证集都不能为空")
        self.manifest.append(
            "run_start",
            run=self.name,
            model=self.config.model,
            seed=self.config.seed,
            dataset_sha256=self.data.digest(),
            n_train=len(self.data.train),
            n_val=len(self.data.validation),
            net=self.net_cfg.to_dict(),
            config=self.config.echo(),
            **fields,
        )

    def save(self, params: NetParams, epoch: int, loss: float) -> None:
        save_checkpoint(
            self.checkpoint_path, params, self.net_cfg,
            model=self.config.model, seed=self.config.seed, epoch=epoch, loss=loss,
            constant_variance=self.constant_variance, config=self.config.echo(),
        )
        self.last_checkpoint = self.checkpoint_path
        self.manifest.append("checkpoint", epoch=epoch, loss=loss, path=self.checkpoint_path.name)

    def abort(self, epoch: int, reason: str) -> NumericalAbortError:
        self.manifest.append("abort", epoch=epoch, reason=reason,
                             last_checkpoint=self.last_checkpoint.name if self.last_checkpoint else None)
        logger.error(f"[{self.name}] 第 {epoch} 轮数值中止: {reason}")
        return NumericalAbortError(
            f"{self.name} 第 {epoch} 轮数值中止: {reason}",
            last_checkpoint=str(self.last_checkpoint) if self.last_checkpoint else None,
            manifest_path=str(self.manifest.path),
        )

    def step(self, params: NetParams, state: AdamState, batch: List[Utterance], objective: Objective,
             k: int, lr: float, clip: bool, epoch: int) -> Tuple[NetParams, AdamState, float]:
        loss, grad, winners = _batch_step(params, self.net_cfg, batch, objective, k)
        if not math.isfinite(loss):
            raise self.abort(epoch, f"训练损失非有限 ({loss})")
        if winners:
            logger.debug(f"[{self.name}] epoch {epoch} K={k} winners={winners}")
        if clip:
            grad, norm = clip_grad_norm(grad, self.config.train.grad_clip_norm)
            if not math.isfinite(norm):
                raise self.abort(epoch, "梯度范数非有限")
        try:
            theta, state = adam_step(params.theta, grad, state, lr, self.config.train.weight_decay)
        except NumericalAbortError as e:
            raise self.abort(epoch, str(e)) from e
        return NetParams(theta=theta, layout=params.layout), state, loss

    def train_epoch(self, params: NetParams, state: AdamState, objective: Objective, k: int,
                    lr: float, clip: bool, epoch: int) -> Tuple[NetParams, AdamState, float]:
        order = _epoch_order(self.config.seed, epoch, len(self.data.train))
        total = 0.0
        count = 0
        for batch_ids in batch_indices(order.tolist(), self.config.train.batch_size):
            batch = [self.data.train[i] for i in batch_ids]
            params, state, loss = self.step(params, state, batch, objective, k, lr, clip, epoch)
            total += loss * len(batch)
            count += len(batch)
        return params, state, total / count

    def finish(self, best_epoch: int, best_val: float, history: List[Dict[str, Any]],
               params: NetParams) -> TrainResult:
        self.manifest.append("run_end", best_epoch=best_epoch, best_val_loss=best_val,
                             checkpoint=self.checkpoint_path.name, epochs_run=len(history))
        return TrainResult(
            checkpoint=self.checkpoint_path,
            manifest=self.manifest.path,
            best_epoch=best_epoch,
            best_val_loss=best_val,
            history=history,
            params=params,
            net_config=self.net_cfg,
        )


def _fit(config: Config, data: TrainingData, net_cfg: NetConfig, params: NetParams,
         objective: Objective, name: str, lr: float, out_dir: Optional[Union[str, Path]],
         **start_fields: Any) -> TrainResult:
    """验证集驱动的训练：平台期学习率减半、早停、保存最佳检查点。"""
    tc = config.train
    run = _Run(config, data, net_cfg, name, out_dir, objective.constant_variance)
    clip = clipping_enabled(tc, objective)
    run.start(objective=objective.kind, constant_variance=objective.constant_variance,
              betas=list(objective.betas), lr=lr, grad_clip=clip, **start_fields)

    scheduler = PlateauScheduler(lr=lr, patience=tc.plateau_patience, factor=tc.plateau_factor,
                                 tol=tc.improvement_tol)
    stopper = EarlyStopping(patience=tc.early_stop_patience, tol=tc.improvement_tol)
    state = AdamState.zeros(params.size)
    best_params = params
    history: List[Dict[str, Any]] = []

    for epoch in tqdm(range(1, tc.max_epochs + 1), desc=name, unit="epoch", leave=False, disable=None):
        current_lr = scheduler.lr
        params, state, train_loss = run.train_epoch(params, state, objective, 1, current_lr, clip, epoch)
        val_loss = evaluate_loss(params, net_cfg, data.validation, objective)
        if not math.isfinite(val_loss):
            raise run.abort(epoch, f"验证损失非有限 ({val_loss})")

        improved = stopper.step(epoch, val_loss)
        if improved:
            best_params = params
            run.save(params, epoch, val_loss)
        scheduler.step(val_loss)
        record = {"epoch": epoch, "lr": current_lr, "train_loss": train_loss,
                  "val_loss": val_loss, "improved": improved}
        history.append(record)
        run.manifest.append("epoch", **record)
        logger.info(f"[{name}] epoch {epoch}: lr={current_lr:.3g} train={train_loss:.6g} val={val_loss:.6g}"
                    + (" *" if improved else ""))
        if stopper.should_stop:
            logger.info(f"[{name}] {tc.early_stop_patience} 轮未改善，第 {epoch} 轮早停")
            break

    if net_cfg.num_components > 1:
        diversity = hypothesis_diversity(best_params, net_cfg, data.validation)
        run.manifest.append("diversity", value=diversity)
        logger.info(f"[{name}] 假设多样性（平均两两掩码距离）= {diversity:.4f}")
    return run.finish(stopper.best_epoch, stopper.best, history, best_params)


def train_baseline(config: Config, data: TrainingData,
                   out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """单掩码 Wiener 基线，MSE 损失。"""
    net_cfg = net_config_for(config, 1)
    params = init_params(net_cfg, config.seed)
    return _fit(config, data, net_cfg, params, Objective(kind="mse"), "wf", config.train.lr_init, out_dir)


def train_cgmm(config: Config, data: TrainingData, L: int, constant_variance: bool = False,
               init: Optional[Union[str, Path]] = None, out_dir: Optional[Union[str, Path]] = None,
               name: Optional[str] = None) -> TrainResult:
    """
    用 CGMM 负对数后验训练 L 分量网络。

    参数:
        config: 主配置
        data: 训练/验证数据
        L: 分量数
        constant_variance: λ ≡ 1（方差头不参与训练）
        init: WTA 预训练检查点；给出时加载隐藏层与掩码头，方差/权重头重新初始化，
              学习率改用 finetune_lr
        out_dir: 输出目录
        name: 检查点与清单的文件名前缀

    返回:
        TrainResult
    """
    net_cfg = net_config_for(config, L)
    params = init_params(net_cfg, config.seed)
    lr = config.train.lr_init
    start_fields: Dict[str, Any] = {}
    if init is not None:
        ckpt = load_checkpoint(init)
        if ckpt.net_config != net_cfg:
            raise ConfigurationError(f"初始化检查点的网络结构与当前配置不一致: {init}")
        params = transfer_params(ckpt.params, params, heads=("mask",))
        lr = config.train.finetune_lr
        start_fields["init"] = Path(init).name
        logger.info(f"从 {init} 加载隐藏层与掩码头，微调学习率 {lr:g}")
    if name is None:
        name = f"cgmm{L}" + ("-cons" if constant_variance else "") + ("-pre" if init is not None else "")
    objective = Objective(kind="cgmm", constant_variance=constant_variance, betas=tuple(config.train.betas))
    return _fit(config, data, net_cfg, params, objective, name, lr, out_dir, **start_fields)


def pretrain_wta(config: Config, data: TrainingData, L: int,
                 out_dir: Optional[Union[str, Path]] = None, name: str = "wta") -> TrainResult:
    """
    WTA 预训练：只训练掩码，K 从 L 起每 wta_k_halve_every 轮减半到 1。

    前 wta_epochs 轮学习率恒定，之后每 wta_lr_halve_every 轮减半，
    直到再减半就会低于 lr_floor。保存最后一轮的参数。
    """
    if L < 2:
        raise ConfigurationError(f"WTA 预训练要求 L >= 2，得到 {L}")
    tc = config.train
    net_cfg = net_config_for(config, L)
    params = init_params(net_cfg, config.seed)
    objective = Objective(kind="wta")
    run = _Run(config, data, net_cfg, name, out_dir, constant_variance=False)
    total_epochs = wta_total_epochs(tc)
    clip = clipping_enabled(tc, objective)
    run.start(objective="wta", total_epochs=total_epochs, grad_clip=clip)

    state = AdamState.zeros(params.size)
    history: List[Dict[str, Any]] = []
    val_loss = math.inf
    for epoch in tqdm(range(1, total_epochs + 1), desc=name, unit="epoch", leave=False, disable=None):
        k = wta_k_schedule(L, epoch, tc.wta_k_halve_every)
        lr = wta_learning_rate(epoch, tc)
        params, state, train_loss = run.train_epoch(params, state, objective, k, lr, clip, epoch)
        val_loss = evaluate_loss(params, net_cfg, data.validation, objective, k=1)
        if not math.isfinite(val_loss):
            raise run.abort(epoch, f"验证损失非有限 ({val_loss})")
        record = {"epoch": epoch, "lr": lr, "k": k, "train_loss": train_loss, "val_loss": val_loss}
        history.append(record)
        run.manifest.append("epoch", **record)
        logger.info(f"[{name}] epoch {epoch}: K={k} lr={lr:.3g} train={train_loss:.6g} val(K=1)={val_loss:.6g}")

    run.save(params, total_epochs, val_loss)
    diversity = hypothesis_diversity(params, net_cfg, data.validation)
    run.manifest.append("diversity", value=diversity)
    logger.info(f"[{name}] 假设多样性（平均两两掩码距离）= {diversity:.4f}")
    return run.finish(total_epochs, val_loss, history, params)


def train_model(config: Config, data: Optional[TrainingData] = None,
                out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """按 config.model 训练对应模型。"""
    data = data if data is not None else load_training_data(config)
    model = config.model
    L = config.component_count()
    logger.info(f"训练模型 {model}（L={L}，seed={config.seed}）")
    if model == "wf":
        return train_baseline(config, data, out_dir=out_dir)
    if model == "cgmm4-pre":
        wta = pretrain_wta(config, data, L, out_dir=out_dir)
        return train_cgmm(config, data, L, init=wta.checkpoint, out_dir=out_dir, name=model)
    return train_cgmm(config, data, L, constant_variance=(model == "cgmm4-cons"),
                      out_dir=out_dir, name=model)
