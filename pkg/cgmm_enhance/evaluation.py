"""
增强指标与不确定性质量评估。

- 波形指标：SI-SDR、分段 SNR；谱指标：谱 RMSE
- 稀疏化曲线：按排序键依次去掉排名最高的时频点，记录剩余点的误差 RMSE；
  排序键可以是预测不确定性（predicted）、真实误差（oracle）或随机（random）
- AUSE：预测曲线与 oracle 曲线之间的梯形面积

evaluate_checkpoint 把以上串成对一个划分的完整评估，输出 CSV：

    metrics.csv              uid, snr_db, si_sdr_in, si_sdr_out, si_sdr_improvement, seg_snr, spec_rmse
    summary.csv              group, metric, mean, ci95, n
    sparsification.csv       fraction, rmse_predicted, rmse_oracle, rmse_random, key
    sparsification/<uid>.csv 每条语句的同格式曲线
    heatmaps/<uid>.csv       f, t, error, aleatoric, epistemic
    ause.csv                 uid, key, ause_predicted, ause_random
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import trapezoid
from tqdm import tqdm

from .config import Config
from .data import Manifest, Utterance, load_split
from .dsp import ComplexSpectrogram, Waveform, istft
from .enhance import Enhancer
from .exceptions import EvaluationError
from .manifest import RunManifest
from .posterior import decompose_uncertainty, oracle_posterior

logger = logging.getLogger(__name__)

SDR_CAP_DB = 60.0
SEG_FRAME = 256
SEG_SNR_RANGE = (-10.0, 35.0)
RANKING_KINDS = ("predicted", "oracle", "random")
UNCERTAINTY_KEYS = ("aleatoric", "epistemic", "total")
SNR_BANDS = ((-math.inf, 6.0, "<6dB"), (6.0, 12.0, "6-12dB"), (12.0, math.inf, ">12dB"))
CSV_FLOAT_FORMAT = "%.17g"


def _as_array(x: Union[ComplexSpectrogram, np.ndarray]) -> np.ndarray:
    if isinstance(x, ComplexSpectrogram):
        return x.coefficients
    return np.asarray(x)


def spectral_error(S_est: Union[ComplexSpectrogram, np.ndarray],
                   S_ref: Union[ComplexSpectrogram, np.ndarray]) -> np.ndarray:
    """逐时频点的 |S_ref − S_est|。"""
    est, ref = _as_array(S_est), _as_array(S_ref)
    if est.shape != ref.shape:
        raise EvaluationError(f"形状不一致: {est.shape} vs {ref.shape}")
    return np.abs(ref - est)


def spec_rmse(S_est: Union[ComplexSpectrogram, np.ndarray],
              S_ref: Union[ComplexSpectrogram, np.ndarray]) -> float:
    return float(np.sqrt(np.mean(spectral_error(S_est, S_ref) ** 2)))


@dataclass
class SparsificationCurve:
    """去除比例网格上的剩余 RMSE。"""
    fractions: np.ndarray
    rmse: np.ndarray
    kind: str


def fraction_grid(steps: int = 100) -> np.ndarray:
    """[0, 1/steps, …, (steps−1)/steps]。"""
    if steps < 1:
        raise EvaluationError(f"steps 至少为 1: {steps}")
    return np.arange(steps) / steps


def _ranking(errors: np.ndarray, uncertainty: Optional[np.ndarray], kind: str,
             rng: Optional[np.random.Generator]) -> np.ndarray:
    """按排名从高到低的展平索引；并列时按 (f, t) 字典序。"""
    n = errors.size
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.permutation(n)
    if kind == "oracle":
        key = errors.ravel()
    elif kind == "predicted":
        if uncertainty is None:
            raise EvaluationError("predicted 排序需要不确定性图")
        key = np.asarray(uncertainty, dtype=np.float64).ravel()
    else:
        raise EvaluationError(f"未知排序方式: {kind}（可选 {RANKING_KINDS}）")
    return np.argsort(-key, kind="stable")


def _curve_from_order(sq_errors: np.ndarray, order: np.ndarray, steps: int) -> np.ndarray:
    n = sq_errors.size
    ranked = sq_errors[order]
    # suffix[m] = 去掉前 m 个之后的平方误差和
    suffix = np.concatenate([np.cumsum(ranked[::-1])[::-1], [0.0]])
    removed = np.minimum(np.arange(steps) * n // steps, n - 1)
    return np.sqrt(np.maximum(suffix[removed], 0.0) / (n - removed))


def sparsify(errors: np.ndarray, uncertainty: Optional[np.ndarray], kind: str,
             steps: int = 100, rng: Optional[np.random.Generator] = None) -> SparsificationCurve:
    """
    稀疏化曲线。

    参数:
        errors: 逐点绝对误差 (F, T)
        uncertainty: 同形状的不确定性（kind=predicted 时使用）
        kind: predicted | oracle | random
        steps: 去除比例网格步数
        rng: random 排序的随机数发生器

    返回:
        SparsificationCurve
    """
    errors = np.asarray(errors, dtype=np.float64)
    if uncertainty is not None and np.shape(uncertainty) != errors.shape:
        raise EvaluationError(f"误差与不确定性形状不一致: {errors.shape} vs {np.shape(uncertainty)}")
    if errors.size == 0:
        raise EvaluationError("误差图为空")
    fractions = fraction_grid(steps)
    order = _ranking(errors, uncertainty, kind, rng)
    rmse = _curve_from_order(errors.ravel() ** 2, order, steps)
    return SparsificationCurve(fractions=fractions, rmse=rmse, kind=kind)


def sparsify_pooled(error_maps: Sequence[np.ndarray], uncertainty_maps: Optional[Sequence[np.ndarray]],
                    kind: str, steps: int = 100,
                    rng: Optional[np.random.Generator] = None) -> SparsificationCurve:
    """把所有语句的时频点合并后再做稀疏化。"""
    if not error_maps:
        raise EvaluationError("没有误差图")
    errors = np.concatenate([np.asarray(e, dtype=np.float64).ravel() for e in error_maps])
    uncertainty = None
    if uncertainty_maps is not None:
        uncertainty = np.concatenate([np.asarray(u, dtype=np.float64).ravel() for u in uncertainty_maps])
    return sparsify(errors, uncertainty, kind, steps=steps, rng=rng)


def mean_curve(curves: Sequence[SparsificationCurve]) -> SparsificationCurve:
    """逐比例平均多条曲线（网格必须一致）。"""
    if not curves:
        raise EvaluationError("没有曲线可平均")
    fractions = curves[0].fractions
    for curve in curves[1:]:
        if not np.array_equal(curve.fractions, fractions):
            raise EvaluationError("曲线的比例网格不一致")
    rmse = np.mean(np.stack([c.rmse for c in curves]), axis=0)
    return SparsificationCurve(fractions=fractions, rmse=rmse, kind=curves[0].kind)


def ause(predicted: SparsificationCurve, oracle: SparsificationCurve) -> float:
    """Area between the predicted and oracle curves (trapezoidal rule)."""
    if not np.array_equal(predicted.fractions, oracle.fractions):
        raise EvaluationError("两条曲线的比例网格不一致")
    return float(trapezoid(predicted.rmse - oracle.rmse, predicted.fractions))


def si_sdr(est: Waveform, ref: Waveform) -> float:
    """
    Scale-invariant SDR in dB, capped at +60 dB.

    An all-zero estimate, or one orthogonal to the reference, is reported at −60 dB.
    """
    e = est.samples if isinstance(est, Waveform) else np.asarray(est, dtype=np.float64)
    r = ref.samples if isinstance(ref, Waveform) else np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape:
        raise EvaluationError(f"长度不一致: {e.shape} vs {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0:
        raise EvaluationError("参考信号能量为零")
    target = (np.dot(e, r) / ref_energy) * r
    residual = e - target
    target_energy = float(np.dot(target, target))
    residual_energy = float(np.dot(residual, residual))
    if target_energy == 0:
        return -SDR_CAP_DB
    if residual_energy == 0:
        return SDR_CAP_DB
    return float(np.clip(10.0 * math.log10(target_energy / residual_energy), -SDR_CAP_DB, SDR_CAP_DB))


def seg_snr(est: Waveform, ref: Waveform, frame_len: int = SEG_FRAME) -> float:
    """分段 SNR：不重叠的 frame_len 样本帧，每帧截断到 [−10, 35] dB 后取平均。"""
    e = est.samples if isinstance(est, Waveform) else np.asarray(est, dtype=np.float64)
    r = ref.samples if isinstance(ref, Waveform) else np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape:
        raise EvaluationError(f"长度不一致: {e.shape} vs {r.shape}")
    n_frames = r.shape[0] // frame_len
    if n_frames == 0:
        raise EvaluationError(f"信号短于一个分段帧 ({frame_len} 样本)")
    usable = n_frames * frame_len
    sig = np.sum(r[:usable].reshape(n_frames, frame_len) ** 2, axis=1)
    noise = np.sum((r[:usable] - e[:usable]).reshape(n_frames, frame_len) ** 2, axis=1)
    tiny = np.finfo(np.float64).tiny
    per_frame = 10.0 * np.log10((sig + tiny) / (noise + tiny))
    return float(np.mean(np.clip(per_frame, *SEG_SNR_RANGE)))


def confidence_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float]:
    """(均值, Student t 置信区间半宽)；样本数小于 2 时半宽为 nan。"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EvaluationError("没有样本")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, float("nan")
    sem = float(arr.std(ddof=1) / math.sqrt(arr.size))
    return mean, float(stats.t.ppf(0.5 + level / 2.0, arr.size - 1) * sem)


def snr_band(snr_db: float) -> str:
    for low, high, label in SNR_BANDS:
        if low <= snr_db < high:
            return label
    return SNR_BANDS[-1][2]


METRIC_COLUMNS = ("si_sdr_in", "si_sdr_out", "si_sdr_improvement", "seg_snr", "spec_rmse")


@dataclass
class MetricReport:
    """逐语句指标；聚合值可由行重新计算。"""
    rows: pd.DataFrame

    @classmethod
    def from_records(cls, records: List[Dict[str, float]]) -> "MetricReport":
        frame = pd.DataFrame.from_records(records, columns=["uid", "snr_db", *METRIC_COLUMNS])
        return cls(rows=frame)

    def aggregate(self, level: float = 0.95) -> pd.DataFrame:
        """整体、按测试 SNR、按 SNR 区间的均值与置信区间。"""
        groups = [("overall", self.rows)]
        for snr, part in self.rows.groupby("snr_db", sort=True):
            groups.append((f"snr={snr:g}", part))
        bands = self.rows["snr_db"].map(snr_band)
        for _, _, label in SNR_BANDS:
            part = self.rows[bands == label]
            if len(part):
                groups.append((f"band={label}", part))

        records = []
        for name, part in groups:
            for metric in METRIC_COLUMNS:
                mean, half = confidence_interval(part[metric].to_numpy(), level)
                records.append({"group": name, "metric": metric, "mean": mean, "ci95": half, "n": len(part)})
        return pd.DataFrame.from_records(records, columns=["group", "metric", "mean", "ci95", "n"])

    def write(self, out_dir: Union[str, Path]) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(out / "metrics.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        self.aggregate().to_csv(out / "summary.csv", index=False, float_format=CSV_FLOAT_FORMAT)


def _curves_frame(curves: Dict[str, Dict[str, SparsificationCurve]]) -> pd.DataFrame:
    parts = []
    for key, by_kind in curves.items():
        parts.append(pd.DataFrame({
            "fraction": by_kind["predicted"].fractions,
            "rmse_predicted": by_kind["predicted"].rmse,
            "rmse_oracle": by_kind["oracle"].rmse,
            "rmse_random": by_kind["random"].rmse,
            "key": key,
        }))
    return pd.concat(parts, ignore_index=True)


def uncertainty_curves(errors: np.ndarray, maps: Dict[str, np.ndarray], steps: int,
                       rng: np.random.Generator) -> Dict[str, Dict[str, SparsificationCurve]]:
    """每个不确定性键的 predicted 曲线，以及共用的 oracle / random 曲线。"""
    oracle = sparsify(errors, None, "oracle", steps=steps)
    random_curve = sparsify(errors, None, "random", steps=steps, rng=rng)
    return {
        key: {"predicted": sparsify(errors, maps[key], "predicted", steps=steps),
              "oracle": oracle, "random": random_curve}
        for key in UNCERTAINTY_KEYS
    }


def _pooled_curves(error_maps: List[np.ndarray], key_maps: Dict[str, List[np.ndarray]], steps: int,
                   seed: int) -> Dict[str, Dict[str, SparsificationCurve]]:
    oracle = sparsify_pooled(error_maps, None, "oracle", steps=steps)
    random_curve = sparsify_pooled(error_maps, None, "random", steps=steps, rng=np.random.default_rng(seed))
    return {
        key: {"predicted": sparsify_pooled(error_maps, key_maps[key], "predicted", steps=steps),
              "oracle": oracle, "random": random_curve}
        for key in UNCERTAINTY_KEYS
    }


def _averaged(per_utt: List[Dict[str, Dict[str, SparsificationCurve]]]) -> Dict[str, Dict[str, SparsificationCurve]]:
    return {
        key: {kind: mean_curve([u[key][kind] for u in per_utt]) for kind in RANKING_KINDS}
        for key in UNCERTAINTY_KEYS
    }


@dataclass
class EvaluationResult:
    report: MetricReport
    curves: Dict[str, Dict[str, SparsificationCurve]]
    ause_table: pd.DataFrame
    out_dir: Path
    pooled_curves: Dict[str, Dict[str, SparsificationCurve]] = field(default_factory=dict)

    def mean_ause(self, key: str = "total") -> Tuple[float, float]:
        """(预测排序的平均 AUSE, 随机排序的平均 AUSE)。"""
        part = self.ause_table[self.ause_table["key"] == key]
        return float(part["ause_predicted"].mean()), float(part["ause_random"].mean())


def _write_heatmap(path: Path, errors: np.ndarray, aleatoric: np.ndarray, epistemic: np.ndarray) -> None:
    n_freq, n_frames = errors.shape
    f_idx, t_idx = np.meshgrid(np.arange(n_freq), np.arange(n_frames), indexing="ij")
    pd.DataFrame({
        "f": f_idx.ravel(),
        "t": t_idx.ravel(),
        "error": errors.ravel(),
        "aleatoric": aleatoric.ravel(),
        "epistemic": epistemic.ravel(),
    }).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def evaluate_utterances(utterances: Sequence[Utterance], out_dir: Union[str, Path], config: Config,
                        enhancer: Optional[Enhancer] = None) -> EvaluationResult:
    """
    评估一组语句并写出全部 CSV。

    enhancer 为 None 时使用由纯净语音与噪声真值构造的 oracle Wiener 后验。
    """
    if not utterances:
        raise EvaluationError("没有可评估的语句")
    out = Path(out_dir)
    (out / "sparsification").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    steps = config.eval.fraction_steps

    records = []
    ause_records = []
    per_utt_curves = []
    error_maps: List[np.ndarray] = []
    key_maps: Dict[str, List[np.ndarray]] = {key: [] for key in UNCERTAINTY_KEYS}
    for index, utt in enumerate(tqdm(utterances, desc="evaluate", unit="utt", leave=False, disable=None)):
        if utt.noisy_wave is None or utt.clean_wave is None:
            raise EvaluationError(f"{utt.uid} 缺少波形")
        if enhancer is None:
            if utt.noise is None:
                raise EvaluationError(f"{utt.uid} 缺少噪声谱，无法构造 oracle 后验")
            posterior = oracle_posterior(utt.clean.coefficients, utt.noise.coefficients)
            maps = decompose_uncertainty(posterior, utt.noisy)
        else:
            _, maps = enhancer.enhance(utt.noisy)
        estimate_wave = istft(utt.noisy.with_coefficients(maps.mean))

        errors = spectral_error(maps.mean, utt.clean)
        sdr_in = si_sdr(utt.noisy_wave, utt.clean_wave)
        sdr_out = si_sdr(estimate_wave, utt.clean_wave)
        records.append({
            "uid": utt.uid,
            "snr_db": utt.snr_db,
            "si_sdr_in": sdr_in,
            "si_sdr_out": sdr_out,
            "si_sdr_improvement": sdr_out - sdr_in,
            "seg_snr": seg_snr(estimate_wave, utt.clean_wave),
            "spec_rmse": spec_rmse(maps.mean, utt.clean),
        })

        key_values = {"aleatoric": maps.aleatoric, "epistemic": maps.epistemic, "total": maps.total}
        rng = np.random.default_rng([config.eval.random_seed, index])
        curves = uncertainty_curves(errors, key_values, steps, rng)
        per_utt_curves.append(curves)
        _curves_frame(curves).to_csv(out / "sparsification" / f"{utt.uid}.csv", index=False,
                                     float_format=CSV_FLOAT_FORMAT)
        _write_heatmap(out / "heatmaps" / f"{utt.uid}.csv", errors, maps.aleatoric, maps.epistemic)
        for key in UNCERTAINTY_KEYS:
            ause_records.append({
                "uid": utt.uid,
                "key": key,
                "ause_predicted": ause(curves[key]["predicted"], curves[key]["oracle"]),
                "ause_random": ause(curves[key]["random"], curves[key]["oracle"]),
            })
        error_maps.append(errors)
        for key in UNCERTAINTY_KEYS:
            key_maps[key].append(key_values[key])

    report = MetricReport.from_records(records)
    report.write(out)
    averaged = _averaged(per_utt_curves)
    pooled = _pooled_curves(error_maps, key_maps, steps, config.eval.random_seed)
    main_curves = averaged if config.eval.aggregation == "utterance" else pooled
    _curves_frame(main_curves).to_csv(out / "sparsification.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    ause_table = pd.DataFrame.from_records(ause_records, columns=["uid", "key", "ause_predicted", "ause_random"])
    ause_table.to_csv(out / "ause.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    return EvaluationResult(report=report, curves=averaged, ause_table=ause_table, out_dir=out,
                            pooled_curves=pooled)


def evaluate_checkpoint(checkpoint: Optional[Union[str, Path]], manifest: Union[Manifest, str, Path],
                        split: str, out_dir: Union[str, Path], config: Config,
                        oracle: bool = False) -> EvaluationResult:
    """
    评估检查点（或 oracle Wiener 上界）在清单某个划分上的表现。

    参数:
        checkpoint: 检查点路径；oracle=True 时可为 None
        manifest: 清单或其路径
        split: 划分名
        out_dir: 输出目录
        config: 主配置（STFT、稀疏化网格、随机种子、聚合方式）
        oracle: 使用真值构造的 Wiener 后验代替网络

    返回:
        EvaluationResult
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    if checkpoint is None and not oracle:
        raise EvaluationError("需要检查点，或使用 oracle 模式")
    enhancer = None if oracle else Enhancer.from_checkpoint(checkpoint, dsp=config.dsp)
    utterances = load_split(manifest, split, dsp_cfg=config.dsp)

    out = Path(out_dir)
    run = RunManifest(out / "run_manifest.jsonl")
    run.append("evaluate_start", split=split, oracle=oracle, n_utterances=len(utterances),
               checkpoint=Path(checkpoint).name if checkpoint is not None else None,
               dataset_sha256=manifest.digest(), config=config.echo())
    result = evaluate_utterances(utterances, out, config, enhancer=enhancer)

    predicted, random_ause = result.mean_ause("total")
    summary = result.report.aggregate()
    overall = summary[(summary["group"] == "overall")].set_index("metric")["mean"].to_dict()
    run.append("evaluate_end", mean_ause_total=predicted, mean_ause_random=random_ause, overall=overall)
    logger.info(
        f"评估完成 {len(utterances)} 条: SI-SDR {overall['si_sdr_in']:.2f} -> {overall['si_sdr_out']:.2f} dB, "
        f"AUSE(total)={predicted:.4g}, AUSE(random)={random_ause:.4g}"
    )
    return result


def sparsify_from_dir(eval_dir: Union[str, Path], aggregation: str = "utterance", steps: int = 100,
                      random_seed: int = 0) -> pd.DataFrame:
    """
    由 evaluate 输出的 heatmaps/<uid>.csv 重新计算稀疏化曲线。

    写出 sparsification_<aggregation>.csv 并返回对应的表。
    """
    base = Path(eval_dir)
    metrics_path = base / "metrics.csv"
    if not metrics_path.is_file():
        raise EvaluationError(f"{base} 不是评估输出目录（缺少 metrics.csv）")
    if aggregation not in ("utterance", "pooled"):
        raise EvaluationError(f"未知聚合方式: {aggregation}")
    uids = pd.read_csv(metrics_path)["uid"].astype(str).tolist()

    error_maps = []
    key_maps: Dict[str, List[np.ndarray]] = {key: [] for key in UNCERTAINTY_KEYS}
    for uid in uids:
        path = base / "heatmaps" / f"{uid}.csv"
        if not path.is_file():
            raise EvaluationError(f"缺少热图: {path}")
        frame = pd.read_csv(path)
        error_maps.append(frame["error"].to_numpy())
        key_maps["aleatoric"].append(frame["aleatoric"].to_numpy())
        key_maps["epistemic"].append(frame["epistemic"].to_numpy())
        key_maps["total"].append(frame["aleatoric"].to_numpy() + frame["epistemic"].to_numpy())

    if aggregation == "pooled":
        curves = _pooled_curves(error_maps, key_maps, steps, random_seed)
    else:
        per_utt = []
        for index, errors in enumerate(error_maps):
            maps = {key: key_maps[key][index] for key in UNCERTAINTY_KEYS}
            per_utt.append(uncertainty_curves(errors, maps, steps, np.random.default_rng([random_seed, index])))
        curves = _averaged(per_utt)
    frame = _curves_frame(curves)
    frame.to_csv(base / f"sparsification_{aggregation}.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info(f"稀疏化曲线（{aggregation}，{len(uids)} 条语句）已写入 {base}")
    return frame
