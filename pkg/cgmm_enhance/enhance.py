"""
用训练好的检查点做增强。

Enhancer 把网络输出解释为后验参数，计算后验均值与不确定性分解，
并经 iSTFT 得到增强波形。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .checkpoint import load_checkpoint
from .config import DspConfig
from .dsp import ComplexSpectrogram, Waveform, istft, read_wav, stft, write_spectrogram, write_wav
from .exceptions import CheckpointError
from .net import NetConfig, NetParams, forward
from .posterior import PosteriorParams, UncertaintyMaps, decompose_uncertainty, write_uncertainty_csv

logger = logging.getLogger(__name__)


@dataclass
class EnhancedUtterance:
    waveform: Waveform
    spectrogram: ComplexSpectrogram
    posterior: PosteriorParams
    uncertainty: UncertaintyMaps


class Enhancer:
    """检查点推理。"""

    def __init__(self, params: NetParams, net_config: NetConfig, constant_variance: bool = False,
                 dsp: Optional[DspConfig] = None, model: str = ""):
        self.params = params
        self.net_config = net_config
        self.constant_variance = constant_variance
        self.dsp = dsp or DspConfig()
        self.model = model
        if self.dsp.n_freq != net_config.n_freq:
            raise CheckpointError(
                f"检查点的频点数 {net_config.n_freq} 与 STFT 设置 (frame_len={self.dsp.frame_len}) 不符"
            )

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], dsp: Optional[DspConfig] = None) -> "Enhancer":
        ckpt = load_checkpoint(path)
        logger.info(f"加载模型 {ckpt.model}（L={ckpt.net_config.num_components}，epoch={ckpt.epoch}）")
        return cls(ckpt.params, ckpt.net_config, ckpt.constant_variance, dsp=dsp, model=ckpt.model)

    def posterior(self, X: ComplexSpectrogram) -> PosteriorParams:
        p, _ = forward(self.params, self.net_config, X)
        if self.constant_variance:
            p = PosteriorParams(masks=p.masks, variances=np.ones_like(p.variances), weights=p.weights)
        return p

    def enhance(self, X: ComplexSpectrogram) -> Tuple[PosteriorParams, UncertaintyMaps]:
        """带噪谱 -> (后验参数, 后验均值与不确定性)。"""
        p = self.posterior(X)
        return p, decompose_uncertainty(p, X)

    def enhance_waveform(self, noisy: Waveform) -> EnhancedUtterance:
        X = stft(noisy, self.dsp.frame_len, self.dsp.hop_len)
        p, maps = self.enhance(X)
        estimate = X.with_coefficients(maps.mean)
        return EnhancedUtterance(
            waveform=istft(estimate),
            spectrogram=estimate,
            posterior=p,
            uncertainty=maps,
        )


def enhance_file(checkpoint: Union[str, Path], input_path: Union[str, Path],
                 output_path: Union[str, Path], dsp: Optional[DspConfig] = None,
                 uncertainty_csv: Optional[Union[str, Path]] = None,
                 mean_spec: Optional[Union[str, Path]] = None) -> EnhancedUtterance:
    """
    增强一个 WAV 文件。

    参数:
        checkpoint: 检查点路径
        input_path: 带噪 WAV
        output_path: 增强后的 WAV（float32，长度与采样率同输入）
        dsp: STFT 设置
        uncertainty_csv: 可选，写出每个时频点的后验均值与不确定性
        mean_spec: 可选，以二进制谱文件写出后验均值（见 dsp.write_spectrogram）
    """
    dsp = dsp or DspConfig()
    enhancer = Enhancer.from_checkpoint(checkpoint, dsp=dsp)
    noisy = read_wav(input_path, expected_rate=dsp.sample_rate)
    result = enhancer.enhance_waveform(noisy)
    write_wav(output_path, result.waveform)
    if uncertainty_csv is not None:
        write_uncertainty_csv(uncertainty_csv, result.uncertainty)
    if mean_spec is not None:
        write_spectrogram(mean_spec, result.spectrogram)
    logger.info(f"已增强 {input_path} -> {output_path}（{len(noisy)} 样本）")
    return result
