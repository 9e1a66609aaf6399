"""
时频分析/合成与音频文件读写。

STFT 使用周期 Hann 窗（50% 重叠时严格满足 COLA），单边谱，
信号两端补零使每个样本都被 frame_len/hop_len 帧完整覆盖；
iSTFT 为带合成窗归一化的重叠相加（WOLA）。
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .exceptions import AudioFormatError, SignalError

logger = logging.getLogger(__name__)

SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")
PCM16_SCALE = 32768.0


@dataclass
class Waveform:
    """单声道实值时域信号。"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"Waveform 必须是一维，得到形状 {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("Waveform 含非有限值")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise SignalError(f"采样率必须是正整数: {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """单边复数 STFT 系数，索引为 (f, t)。"""
    coefficients: np.ndarray
    frame_len: int
    hop_len: int
    sample_rate: int
    num_samples: Optional[int] = field(default=None)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.complex128)
        if self.coefficients.ndim != 2:
            raise SignalError(f"谱系数必须是 (F, T) 矩阵，得到 {self.coefficients.shape}")
        if not np.all(np.isfinite(self.coefficients)):
            raise SignalError("谱系数含非有限值")

    @property
    def n_freq(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[1]

    def with_coefficients(self, coefficients: np.ndarray) -> "ComplexSpectrogram":
        """同一分析参数下的新谱（例如增强后的估计）。"""
        return replace(self, coefficients=coefficients)


def hann_window(frame_len: int) -> np.ndarray:
    """周期（DFT-even）Hann 窗。"""
    return get_window("hann", frame_len, fftbins=True)


def _check_framing(frame_len: int, hop_len: int) -> None:
    if frame_len <= 0 or hop_len <= 0:
        raise SignalError(f"frame_len/hop_len 必须为正: {frame_len}/{hop_len}")
    if frame_len % hop_len != 0:
        raise SignalError(f"hop_len={hop_len} 必须整除 frame_len={frame_len}")
    # 周期 Hann 窗在 hop > frame_len/2 时不满足 COLA，窗的零点处无法重建
    if hop_len > frame_len // 2:
        raise SignalError(f"hop_len={hop_len} 超过 frame_len/2={frame_len // 2}，不满足 COLA")


def frame_signal(samples: np.ndarray, frame_len: int, hop_len: int) -> np.ndarray:
    """
    把信号切成 (T, frame_len) 的帧（未加窗）。

    左侧补 frame_len - hop_len 个零，右侧补零到整帧，
    使原信号每个样本都被 frame_len / hop_len 帧覆盖。
    """
    _check_framing(frame_len, hop_len)
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < frame_len:
        raise SignalError(f"信号长度 {n} 短于一帧 {frame_len}")
    pad = frame_len - hop_len
    n_frames = -(-(n + pad) // hop_len)
    total = (n_frames - 1) * hop_len + frame_len
    padded = np.zeros(total, dtype=np.float64)
    padded[pad:pad + n] = samples
    return sliding_window_view(padded, frame_len)[::hop_len]


def stft(w: Waveform, frame_len: int = 512, hop_len: int = 256) -> ComplexSpectrogram:
    """
    短时傅里叶变换。

    参数:
        w: 输入波形
        frame_len: 帧长（样本）
        hop_len: 帧移（样本），必须整除 frame_len 且不超过 frame_len/2

    返回:
        F = frame_len/2 + 1 的单边复数谱
    """
    frames = frame_signal(w.samples, frame_len, hop_len) * hann_window(frame_len)
    coefficients = np.fft.rfft(frames, n=frame_len, axis=1).T
    return ComplexSpectrogram(
        coefficients=coefficients,
        frame_len=frame_len,
        hop_len=hop_len,
        sample_rate=w.sample_rate,
        num_samples=len(w),
    )


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    frame_len, hop_len = spec.frame_len, spec.hop_len
    _check_framing(frame_len, hop_len)
    if spec.n_freq != frame_len // 2 + 1:
        raise SignalError(
            f"频点数 {spec.n_freq} 与 frame_len={frame_len} 不一致（应为 {frame_len // 2 + 1}）"
        )
    n_frames = spec.n_frames
    if n_frames < 1:
        raise SignalError("谱没有任何帧")

    window = hann_window(frame_len)
    frames = np.fft.irfft(spec.coefficients.T, n=frame_len, axis=1) * window
    total = (n_frames - 1) * hop_len + frame_len
    signal = np.zeros(total)
    norm = np.zeros(total)
    win_sq = window ** 2
    for t in range(n_frames):
        start = t * hop_len
        signal[start:start + frame_len] += frames[t]
        norm[start:start + frame_len] += win_sq
    covered = norm > 1e-10
    signal[covered] /= norm[covered]

    pad = frame_len - hop_len
    length = spec.num_samples if spec.num_samples is not None else total - pad
    if pad + length > total:
        raise SignalError(f"num_samples={length} 超出谱覆盖的长度 {total - pad}")
    return Waveform(samples=signal[pad:pad + length].copy(), sample_rate=spec.sample_rate)


def frame_energies(spec: ComplexSpectrogram) -> np.ndarray:
    """每帧单边谱的 Parseval 能量，等于加窗帧的时域能量。"""
    power = np.abs(spec.coefficients) ** 2
    weights = np.full(spec.n_freq, 2.0)
    weights[0] = 1.0
    if spec.frame_len % 2 == 0:
        weights[-1] = 1.0
    return weights @ power / spec.frame_len


def read_wav(path: Union[str, Path], expected_rate: Optional[int] = None) -> Waveform:
    """
    读取单声道 PCM16 / float32 WAV。

    参数:
        path: 文件路径
        expected_rate: 期望采样率；不一致时报错（不做重采样）

    返回:
        Waveform，样本为 float64
    """
    try:
        info = sf.info(str(path))
    except (RuntimeError, sf.SoundFileError) as e:
        raise AudioFormatError(f"无法解析 WAV 文件 {path}: {e}") from e
    if info.format not in ("WAV", "WAVEX"):
        raise AudioFormatError(f"{path} 不是 WAV 文件（{info.format}）")
    if info.channels != 1:
        raise AudioFormatError(f"{path} 有 {info.channels} 个声道，只支持单声道")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise AudioFormatError(f"{path} 编码 {info.subtype} 不受支持（仅 PCM_16 / FLOAT）")
    if expected_rate is not None and info.samplerate != expected_rate:
        raise AudioFormatError(
            f"{path} 采样率 {info.samplerate} Hz 与期望的 {expected_rate} Hz 不符（不支持重采样）"
        )

    if info.subtype == "PCM_16":
        data, rate = sf.read(str(path), dtype="int16", always_2d=False)
        samples = data.astype(np.float64) / PCM16_SCALE
    else:
        data, rate = sf.read(str(path), dtype="float32", always_2d=False)
        samples = data.astype(np.float64)
    logger.debug(f"读取 {path}: {samples.shape[0]} 样本 @ {rate} Hz ({info.subtype})")
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path: Union[str, Path], w: Waveform, subtype: str = "FLOAT") -> None:
    """写单声道 WAV；FLOAT 为 float32，PCM_16 为 round(x*32768) 截断到 int16。"""
    if subtype not in SUPPORTED_SUBTYPES:
        raise AudioFormatError(f"不支持的编码 {subtype}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if subtype == "PCM_16":
        data = np.clip(np.round(w.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    sf.write(str(target), data, w.sample_rate, subtype=subtype, format="WAV")


def write_spectrogram(path: Union[str, Path], spec: ComplexSpectrogram) -> None:
    """
    Dump a spectrogram: one JSON header line, then little-endian float64
    (re, im) pairs in (f, t) row-major order.
    """
    header = {
        "F": spec.n_freq,
        "T": spec.n_frames,
        "frame_len": spec.frame_len,
        "hop_len": spec.hop_len,
        "sample_rate": spec.sample_rate,
        "num_samples": spec.num_samples,
    }
    interleaved = np.empty(spec.coefficients.shape + (2,), dtype="<f8")
    interleaved[..., 0] = spec.coefficients.real
    interleaved[..., 1] = spec.coefficients.imag
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(interleaved.tobytes())


def read_spectrogram(path: Union[str, Path]) -> ComplexSpectrogram:
    """Inverse of :func:`write_spectrogram`."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        n_freq, n_frames = int(header["F"]), int(header["T"])
    except (ValueError, KeyError) as e:
        raise SignalError(f"谱文件头损坏 {path}: {e}") from e
    expected = n_freq * n_frames * 2 * 8
    if len(payload) != expected:
        raise SignalError(f"谱文件 {path} 长度 {len(payload)} 与文件头不符（应为 {expected}）")
    data = np.frombuffer(payload, dtype="<f8").reshape(n_freq, n_frames, 2)
    return ComplexSpectrogram(
        coefficients=data[..., 0] + 1j * data[..., 1],
        frame_len=int(header["frame_len"]),
        hop_len=int(header["hop_len"]),
        sample_rate=int(header["sample_rate"]),
        num_samples=header.get("num_samples"),
    )
