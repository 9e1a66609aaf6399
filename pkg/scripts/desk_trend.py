#!/usr/bin/env python3
"""
桌面规模趋势检查：每个种子生成一份合成语料，训练全部模型并在测试集上评估。

判据:
  (a) 每个模型在 0 dB 测试语句上的平均 SI-SDR 提升 >= 3 dB
  (b) 每个 CGMM 模型 total 不确定性排序的平均 AUSE 严格小于随机排序
  (c) cgmm4-pre 的最佳验证损失 <= cgmm4（只报告，不计入退出码）
  (d) WTA 预训练后的假设多样性 > 从零训练的 cgmm4（只报告）

在仓库根目录执行:
  python3 scripts/desk_trend.py --out trend-runs
  python3 scripts/desk_trend.py --seeds 1 --models wf,cgmm4 --set max_epochs=5
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cgmm_enhance.config import load_config, setup_logging
from cgmm_enhance.data import build_corpus
from cgmm_enhance.evaluation import evaluate_checkpoint
from cgmm_enhance.exceptions import CgmmEnhanceError
from cgmm_enhance.manifest import read_manifest
from cgmm_enhance.train import load_training_data, train_model
from cgmm_enhance.utils import format_duration

MODELS = ("wf", "cgmm1", "cgmm4", "cgmm4-cons", "cgmm4-pre")
MIN_IMPROVEMENT_DB = 3.0


def logged_diversity(manifest_path: Path) -> float:
    values = [r["value"] for r in read_manifest(manifest_path) if r["event"] == "diversity"]
    return values[-1] if values else float("nan")


def run_seed(seed: int, base: Path, models, overrides, config_path) -> dict:
    seed_dir = base / f"seed{seed}"
    config = load_config(config_path, overrides=[*overrides, f"data_dir={seed_dir / 'corpus'}"],
                         seed=seed, out_dir=str(seed_dir / "runs"))
    setup_logging(config.logging)
    manifest = build_corpus(config)
    data = load_training_data(config)

    results = {}
    for model in models:
        config.set("model", model)
        trained = train_model(config, data)
        evaluation = evaluate_checkpoint(trained.checkpoint, manifest, "test",
                                         seed_dir / f"eval-{model}", config)
        rows = evaluation.report.rows
        at_zero = rows[rows["snr_db"] == 0.0]
        predicted, random_ause = evaluation.mean_ause("total")
        results[model] = {
            "val_loss": trained.best_val_loss,
            "improvement_0db": float(at_zero["si_sdr_improvement"].mean()) if len(at_zero) else float("nan"),
            "ause": predicted,
            "ause_random": random_ause,
        }
        if model == "cgmm4-pre":
            results[model]["diversity"] = logged_diversity(trained.manifest.parent / "wta.manifest.jsonl")
        elif model == "cgmm4":
            results[model]["diversity"] = logged_diversity(trained.manifest)
    return results


def main() -> None:
    p = argparse.ArgumentParser(description="桌面规模端到端趋势检查")
    p.add_argument("--out", default="trend-runs", help="输出根目录")
    p.add_argument("--seeds", default="1,2,3", help="种子列表，逗号分隔")
    p.add_argument("--models", default=",".join(MODELS), help="模型列表，逗号分隔")
    p.add_argument("--config", default=None, help="可选配置文件")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="覆盖配置键，可多次指定")
    args = p.parse_args()
    seeds = [int(x.strip()) for x in args.seeds.split(",") if x.strip()]
    models = [x.strip() for x in args.models.split(",") if x.strip()]

    started = time.time()
    failures = 0
    for seed in seeds:
        try:
            results = run_seed(seed, Path(args.out), models, args.overrides, args.config)
        except CgmmEnhanceError as e:
            print(f"种子 {seed} 运行失败: {e}")
            failures += 1
            continue

        print(f"\n=== seed {seed} ===")
        for model, r in results.items():
            ok_a = r["improvement_0db"] >= MIN_IMPROVEMENT_DB
            ok_b = model == "wf" or r["ause"] < r["ause_random"]
            failures += (not ok_a) + (not ok_b)
            print(f"  {model:<11} val={r['val_loss']:.5g}  ΔSI-SDR@0dB={r['improvement_0db']:+.2f} dB "
                  f"[{'OK' if ok_a else 'FAIL'}]  AUSE={r['ause']:.4g} random={r['ause_random']:.4g} "
                  f"[{'OK' if ok_b else 'FAIL'}]")
        if "cgmm4" in results and "cgmm4-pre" in results:
            pre, scratch = results["cgmm4-pre"]["val_loss"], results["cgmm4"]["val_loss"]
            verdict = "holds" if pre <= scratch else "does not hold, re-examine this seed"
            print(f"  cgmm4-pre {pre:.5g} <= cgmm4 {scratch:.5g}: {verdict}")
            wta_div, scratch_div = results["cgmm4-pre"]["diversity"], results["cgmm4"]["diversity"]
            verdict = "holds" if wta_div > scratch_div else "does not hold"
            print(f"  diversity wta {wta_div:.4f} > cgmm4 {scratch_div:.4f}: {verdict}")

    print(f"\n用时 {format_duration(time.time() - started)}")
    if failures:
        raise SystemExit(f"{failures} 项判据未通过")
    print("全部判据通过。")


if __name__ == "__main__":
    main()
