"""
cgmm-enhance - 基于复高斯混合（CGMM）后验的深度语音增强

此包提供闭式 CGMM 后验、完整的损失族（含 β 停止梯度加权与 WTA）、
可手工反向传播的紧凑掩码网络、训练流程、合成语料，
以及基于稀疏化曲线的不确定性评估。
"""

__version__ = "1.0.0"
__author__ = "cgmm-enhance"

from .dsp import ComplexSpectrogram, Waveform, istft, read_wav, stft, write_wav
from .posterior import (
    PosteriorParams,
    PriorCGMM,
    UncertaintyMaps,
    decompose_uncertainty,
    posterior_from_priors,
    posterior_mean,
)
from .losses import GradModConfig, LossGrad, cg_nll, cgmm_nll, cgmm_nll_beta, mse_loss, wta_loss
from .net import NetConfig, NetParams, backward, forward, init_params
from .train import TrainingData, pretrain_wta, train_baseline, train_cgmm, train_model
from .data import build_corpus, mix_at_snr, synth_noise, synth_speech
from .evaluation import ause, evaluate_checkpoint, si_sdr, sparsify, spectral_error
from .enhance import Enhancer

__all__ = [
    "ComplexSpectrogram",
    "Waveform",
    "stft",
    "istft",
    "read_wav",
    "write_wav",
    "PriorCGMM",
    "PosteriorParams",
    "UncertaintyMaps",
    "posterior_from_priors",
    "posterior_mean",
    "decompose_uncertainty",
    "LossGrad",
    "GradModConfig",
    "mse_loss",
    "cg_nll",
    "cgmm_nll",
    "cgmm_nll_beta",
    "wta_loss",
    "NetConfig",
    "NetParams",
    "forward",
    "backward",
    "init_params",
    "TrainingData",
    "train_baseline",
    "train_cgmm",
    "pretrain_wta",
    "train_model",
    "synth_speech",
    "synth_noise",
    "mix_at_snr",
    "build_corpus",
    "spectral_error",
    "sparsify",
    "ause",
    "si_sdr",
    "evaluate_checkpoint",
    "Enhancer",
]
