"""
合成语料生成与按 SNR 混合。

- 语音：分段恒定 f0 的谐波复合音，按音节调幅，音节之间留静音
- 噪声：white / pink / modulated 三类
- 混合：在活动语音样本上按目标 SNR 缩放噪声，mixture = clean + noise

语料目录结构::

    <root>/clean/<uid>.wav
    <root>/noise/<uid>.wav      # 已缩放的噪声
    <root>/mixture/<uid>.wav
    <root>/manifest.jsonl
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import Config, DspConfig, NOISE_KINDS
from .dsp import ComplexSpectrogram, Waveform, read_wav, stft, write_wav
from .exceptions import DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# 每个划分的种子区间起点相隔 SPLIT_STRIDE，每条语句占用两个种子
SPLIT_STRIDE = 100_000
MAX_UTTERANCES_PER_SPLIT = SPLIT_STRIDE // 2

F0_RANGE = (80.0, 300.0)
HARMONIC_RANGE = (5, 12)
AM_RATE_RANGE = (3.0, 6.0)
SYLLABLE_RANGE_S = (0.15, 0.35)
PAUSE_RANGE_S = (0.12, 0.3)
RAMP_S = 0.01
SPEECH_PEAK = 0.5
ACTIVE_FLOOR_DB = -40.0
GAIN_KNOT_SPACING_S = 0.5


@dataclass
class MixSpec:
    """一条混合语句的生成参数。"""
    snr_db: float
    speech_seed: int
    noise_seed: int
    duration_s: float
    noise_kind: str

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise DataError(f"SNR 必须有限: {self.snr_db}")
        if self.duration_s < 1.0:
            raise DataError(f"时长必须 >= 1 秒: {self.duration_s}")
        if self.noise_kind not in NOISE_KINDS:
            raise DataError(f"未知噪声类型: {self.noise_kind}")


@dataclass
class SpeechPlan:
    """synth_speech 渲染的确定性布局；音节为 (起始样本, 结束样本, f0)。"""
    syllables: List[Tuple[int, int, float]]
    n_harmonics: int
    am_rate: float
    am_phase: float
    num_samples: int


def plan_speech(seed: int, duration_s: float, sample_rate: int) -> SpeechPlan:
    """抽取音节、停顿与 f0 的布局。"""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    n_harmonics = int(rng.integers(HARMONIC_RANGE[0], HARMONIC_RANGE[1] + 1))
    am_rate = float(rng.uniform(*AM_RATE_RANGE))
    am_phase = float(rng.uniform(0.0, 2.0 * np.pi))

    syllables = []
    t = rng.uniform(*PAUSE_RANGE_S)
    while True:
        length = rng.uniform(*SYLLABLE_RANGE_S)
        if t + length > duration_s:
            break
        f0 = float(rng.uniform(*F0_RANGE))
        syllables.append((int(round(t * sample_rate)), int(round((t + length) * sample_rate)), f0))
        t += length + rng.uniform(*PAUSE_RANGE_S)
    return SpeechPlan(
        syllables=syllables,
        n_harmonics=n_harmonics,
        am_rate=am_rate,
        am_phase=am_phase,
        num_samples=n,
    )


def render_speech(plan: SpeechPlan, sample_rate: int) -> np.ndarray:
    samples = np.zeros(plan.num_samples)
    ramp_len = max(1, int(round(RAMP_S * sample_rate)))
    nyquist = sample_rate / 2.0
    for start, stop, f0 in plan.syllables:
        length = stop - start
        local_t = np.arange(length) / sample_rate
        phase = 2.0 * np.pi * f0 * local_t
        segment = np.zeros(length)
        for k in range(1, plan.n_harmonics + 1):
            if k * f0 >= nyquist:
                break
            segment += np.sin(k * phase) / k
        global_t = (start + np.arange(length)) / sample_rate
        segment *= 0.6 + 0.4 * np.sin(2.0 * np.pi * plan.am_rate * global_t + plan.am_phase)
        ramp = np.minimum(1.0, np.minimum(np.arange(1, length + 1), np.arange(length, 0, -1)) / ramp_len)
        samples[start:stop] = segment * ramp
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= SPEECH_PEAK / peak
    return samples


def synth_speech(seed: int, duration_s: float, sample_rate: int) -> Waveform:
    """合成一条类语音信号，峰值归一化到 0.5。"""
    plan = plan_speech(seed, duration_s, sample_rate)
    return Waveform(samples=render_speech(plan, sample_rate), sample_rate=sample_rate)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(spectrum.shape[0], dtype=np.float64)
    shaping = np.zeros_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    return np.fft.irfft(spectrum * shaping, n=n)


def synth_noise(kind: str, seed: int, duration_s: float, sample_rate: int) -> Waveform:
    """
    合成噪声，RMS 归一化为 1。

    white 为 iid 高斯；pink 在频域按 1/sqrt(f) 整形（−3 dB/倍频程）；
    modulated 为 pink 乘以每 0.5 秒一个随机节点的线性插值增益包络。
    """
    if kind not in NOISE_KINDS:
        raise DataError(f"未知噪声类型: {kind}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    if kind == "white":
        samples = rng.standard_normal(n)
    else:
        samples = _pink(rng, n)
        if kind == "modulated":
            n_knots = int(math.ceil(duration_s / GAIN_KNOT_SPACING_S)) + 1
            knots = rng.uniform(0.2, 1.0, size=n_knots)
            knot_t = np.arange(n_knots) * GAIN_KNOT_SPACING_S
            samples = samples * np.interp(np.arange(n) / sample_rate, knot_t, knots)
    rms = np.sqrt(np.mean(samples ** 2))
    return Waveform(samples=samples / rms, sample_rate=sample_rate)


def active_speech_mask(clean: Waveform, floor_db: float = ACTIVE_FLOOR_DB) -> np.ndarray:
    """幅度高于峰值 floor_db 的样本。"""
    peak = np.max(np.abs(clean.samples), initial=0.0)
    if peak == 0:
        return np.zeros(len(clean), dtype=bool)
    return np.abs(clean.samples) > peak * 10.0 ** (floor_db / 20.0)


def measured_snr(clean: Waveform, noise: Waveform, floor_db: float = ACTIVE_FLOOR_DB) -> float:
    """在活动语音样本上测得的 SNR（dB）。"""
    active = active_speech_mask(clean, floor_db)
    e_clean = float(np.sum(clean.samples[active] ** 2))
    e_noise = float(np.sum(noise.samples[active] ** 2))
    if e_clean == 0 or e_noise == 0:
        raise DataError("活动语音段上的能量为零，无法计算 SNR")
    return 10.0 * math.log10(e_clean / e_noise)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Tuple[Waveform, Waveform]:
    """
    按目标 SNR 混合。

    参数:
        clean: 纯净语音
        noise: 噪声；长度不同时循环或截断到 clean 的长度
        snr_db: 目标 SNR（有限值）

    返回:
        (mixture, scaled_noise)，mixture = clean + scaled_noise
    """
    if not math.isfinite(snr_db):
        raise DataError(f"SNR 必须有限: {snr_db}")
    if clean.sample_rate != noise.sample_rate:
        raise DataError(f"采样率不一致: {clean.sample_rate} vs {noise.sample_rate}")
    if not np.any(clean.samples != 0):
        raise DataError("纯净语音能量为零")
    looped = np.resize(noise.samples, len(clean))
    active = active_speech_mask(clean)
    e_clean = float(np.sum(clean.samples[active] ** 2))
    e_noise = float(np.sum(looped[active] ** 2))
    if e_noise == 0:
        raise DataError("噪声在活动语音段上的能量为零")
    scale = math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    scaled = looped * scale
    return (
        Waveform(samples=clean.samples + scaled, sample_rate=clean.sample_rate),
        Waveform(samples=scaled, sample_rate=clean.sample_rate),
    )


@dataclass
class ManifestRow:
    """清单中的一条语句；路径相对于语料根目录。"""
    uid: str
    split: str
    clean: str
    noise: str
    mixture: str
    snr_db: float
    achieved_snr_db: float
    speech_seed: int
    noise_seed: int
    duration_s: float
    noise_kind: str

    def mix_spec(self) -> MixSpec:
        return MixSpec(
            snr_db=self.snr_db,
            speech_seed=self.speech_seed,
            noise_seed=self.noise_seed,
            duration_s=self.duration_s,
            noise_kind=self.noise_kind,
        )


@dataclass
class Manifest:
    """语料清单。"""
    rows: List[ManifestRow]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def split(self, name: str) -> List[ManifestRow]:
        return [row for row in self.rows if row.split == name]

    def render(self) -> str:
        return "".join(json.dumps(asdict(row), sort_keys=True) + "\n" for row in self.rows)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()

    def write(self, path: Optional[Union[str, Path]] = None) -> Path:
        target = Path(path) if path is not None else self.root / "manifest.jsonl"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.render(), encoding="utf-8")
        return target

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Manifest":
        """读取 manifest.jsonl；根目录为文件所在目录。"""
        target = Path(path)
        if target.is_dir():
            target = target / "manifest.jsonl"
        if not target.is_file():
            raise DataError(f"清单不存在: {target}")
        rows = []
        with open(target, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(ManifestRow(**json.loads(line)))
                except (ValueError, TypeError) as e:
                    raise DataError(f"{target}:{lineno}: 清单行无效: {e}") from e
        return cls(rows=rows, root=target.parent)


def _split_specs(config: Config, split_index: int, split: str, count: int) -> List[Tuple[str, MixSpec]]:
    data = config.data
    base = config.seed * 3 * SPLIT_STRIDE + split_index * SPLIT_STRIDE
    specs = []
    for i in range(count):
        rng = np.random.default_rng([config.seed, split_index, i])
        if split == "test":
            snr = float(data.test_snrs[i % len(data.test_snrs)])
        else:
            snr = float(rng.uniform(data.train_snr_min, data.train_snr_max))
        kind = data.noise_kinds[int(rng.integers(len(data.noise_kinds)))]
        spec = MixSpec(
            snr_db=snr,
            speech_seed=base + 2 * i,
            noise_seed=base + 2 * i + 1,
            duration_s=data.duration_s,
            noise_kind=kind,
        )
        specs.append((f"{split}_{i:05d}", spec))
    return specs


def _render_utterance(job: Tuple[str, str, MixSpec, Path, int]) -> ManifestRow:
    uid, split, spec, root, sample_rate = job
    clean = synth_speech(spec.speech_seed, spec.duration_s, sample_rate)
    noise = synth_noise(spec.noise_kind, spec.noise_seed, spec.duration_s, sample_rate)
    mixture, scaled = mix_at_snr(clean, noise, spec.snr_db)
    paths = {}
    for kind, wave in (("clean", clean), ("noise", scaled), ("mixture", mixture)):
        rel = f"{kind}/{uid}.wav"
        write_wav(root / rel, wave)
        paths[kind] = rel
    return ManifestRow(
        uid=uid,
        split=split,
        clean=paths["clean"],
        noise=paths["noise"],
        mixture=paths["mixture"],
        snr_db=spec.snr_db,
        achieved_snr_db=round(measured_snr(clean, scaled), 6),
        speech_seed=spec.speech_seed,
        noise_seed=spec.noise_seed,
        duration_s=spec.duration_s,
        noise_kind=spec.noise_kind,
    )


def build_corpus(config: Config, out_dir: Optional[Union[str, Path]] = None) -> Manifest:
    """
    生成 train / val / test 三个划分并写出 manifest.jsonl。

    参数:
        config: 主配置（语料规模、SNR、噪声类型、种子、采样率）
        out_dir: 语料根目录；为空时使用 config.data.data_dir

    返回:
        Manifest
    """
    data = config.data
    root = Path(out_dir if out_dir is not None else data.data_dir)
    counts = {"train": data.n_train, "val": data.n_val, "test": data.n_test}
    for split, count in counts.items():
        if count > MAX_UTTERANCES_PER_SPLIT:
            raise DataError(f"{split} 划分最多 {MAX_UTTERANCES_PER_SPLIT} 条语句，得到 {count}")
    if counts["test"] and not data.test_snrs:
        raise DataError("test_snrs 为空")

    jobs = []
    for split_index, split in enumerate(SPLITS):
        for uid, spec in _split_specs(config, split_index, split, counts[split]):
            jobs.append((uid, split, spec, root, config.dsp.sample_rate))

    logger.info(f"生成语料 {root}: {counts}（workers={data.workers}）")
    with ThreadPoolExecutor(max_workers=max(1, data.workers)) as executor:
        rows = list(tqdm(executor.map(_render_utterance, jobs), total=len(jobs),
                         desc="synth-data", unit="utt", disable=len(jobs) < 2))

    manifest = Manifest(rows=rows, root=root)
    path = manifest.write()
    logger.info(f"清单已写入 {path}（{len(manifest)} 条，sha256={manifest.digest()[:12]}）")
    return manifest


@dataclass
class Utterance:
    """一条已做 STFT 的训练/评估语句。"""
    uid: str
    noisy: ComplexSpectrogram
    clean: ComplexSpectrogram
    snr_db: float
    noise: Optional[ComplexSpectrogram] = None
    noisy_wave: Optional[Waveform] = None
    clean_wave: Optional[Waveform] = None


def load_split(manifest: Manifest, split: str, root: Optional[Union[str, Path]] = None,
               dsp_cfg: Optional[DspConfig] = None) -> List[Utterance]:
    """按清单顺序读取一个划分并计算 STFT。"""
    dsp_cfg = dsp_cfg or DspConfig()
    base = Path(root) if root is not None else manifest.root
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"清单中没有 {split} 划分的语句")
    utterances = []
    for row in rows:
        def spectrum(rel: str) -> Tuple[Waveform, ComplexSpectrogram]:
            path = base / rel
            if not path.is_file():
                raise DataError(f"清单引用的文件不存在: {path}")
            wave = read_wav(path, expected_rate=dsp_cfg.sample_rate)
            return wave, stft(wave, dsp_cfg.frame_len, dsp_cfg.hop_len)

        noisy_wave, noisy = spectrum(row.mixture)
        clean_wave, clean = spectrum(row.clean)
        _, noise = spectrum(row.noise)
        utterances.append(Utterance(
            uid=row.uid,
            noisy=noisy,
            clean=clean,
            snr_db=row.snr_db,
            noise=noise,
            noisy_wave=noisy_wave,
            clean_wave=clean_wave,
        ))
    logger.debug(f"已加载 {split} 划分 {len(utterances)} 条语句")
    return utterances

