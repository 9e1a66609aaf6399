"""
cgmm-enhance 的命令行界面。

子命令：init、synth-data、train、enhance、evaluate、sparsify。
配置文件是唯一的事实来源，``--set key=value`` 覆盖单个键。

退出码：0 成功；1 用法或配置错误；2 数据、信号、检查点或文件读写错误；3 数值中止。
"""

import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import click

from .config import Config, create_sample_config, load_config, replace_section, setup_logging
from .data import build_corpus
from .enhance import enhance_file
from .evaluation import evaluate_checkpoint, sparsify_from_dir
from .exceptions import CgmmEnhanceError, ConfigurationError, NumericalAbortError
from .manifest import RunManifest
from .train import train_model
from .utils import format_duration

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def common_options(func):
    """--config / --set / --out / --seed。"""
    func = click.option('--seed', type=int, help='主随机种子（覆盖 seed）')(func)
    func = click.option('--out', 'out', type=click.Path(), help='输出目录（覆盖 out_dir）')(func)
    func = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                        help='覆盖单个配置键，可多次指定')(func)
    func = click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
                        help='配置文件路径（key = value 或 YAML）')(func)
    return func


def _load(ctx: click.Context, config_path: Optional[str], overrides: Sequence[str],
          seed: Optional[int], out: Optional[str]) -> Config:
    config = load_config(config_path, overrides=overrides, seed=seed, out_dir=out)
    if ctx.obj.get('verbose'):
        config = replace_section(config, 'logging', log_level='DEBUG')
    elif ctx.obj.get('quiet'):
        config = replace_section(config, 'logging', log_level='ERROR', log_console=False)
    setup_logging(config.logging)
    return config


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='启用详细日志')
@click.option('--quiet', '-q', is_flag=True, help='除错误外抑制输出')
@click.pass_context
def cli(ctx, verbose, quiet):
    """cgmm-enhance - 基于复高斯混合后验的语音增强与不确定性估计。"""
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose
    ctx.obj['quiet'] = quiet


@cli.command()
@click.option('--output', '-o', type=click.Path(), default='cgmm-enhance.cfg', help='输出配置文件路径')
@click.option('--format', 'fmt', type=click.Choice(['cfg', 'yaml']), default='cfg', help='配置文件格式')
def init(output, fmt):
    """初始化示例配置文件。"""
    Path(output).write_text(create_sample_config(fmt), encoding='utf-8')
    click.echo(f"Sample configuration created at: {output}")


@cli.command('synth-data')
@common_options
@click.pass_context
def synth_data(ctx, config_path, overrides, seed, out):
    """生成合成语料（--out 指定语料根目录）。"""
    overrides = list(overrides)
    if out is not None:
        overrides.append(f"data_dir={out}")
    config = _load(ctx, config_path, overrides, seed, None)
    manifest = build_corpus(config)
    counts = {split: len(manifest.split(split)) for split in ('train', 'val', 'test')}
    click.echo(f"\n=== Corpus ===")
    click.echo(f"Root: {manifest.root}")
    click.echo(f"Utterances: {len(manifest)} {counts}")
    click.echo(f"Manifest sha256: {manifest.digest()}")


@cli.command()
@common_options
@click.pass_context
def train(ctx, config_path, overrides, seed, out):
    """按配置键 model 训练（wf / cgmm1 / cgmm4 / cgmm4-cons / cgmm4-pre）。"""
    config = _load(ctx, config_path, overrides, seed, out)
    started = time.time()
    result = train_model(config)
    click.echo(f"\n=== Training Results ===")
    click.echo(f"Model: {config.model}")
    click.echo(f"Best epoch: {result.best_epoch}")
    click.echo(f"Best validation loss: {result.best_val_loss:.6g}")
    click.echo(f"Checkpoint: {result.checkpoint}")
    click.echo(f"Manifest: {result.manifest}")
    click.echo(f"Duration: {format_duration(time.time() - started)}")


@cli.command()
@click.argument('input_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--checkpoint', required=True, type=click.Path(), help='检查点路径')
@click.option('--output', '-o', type=click.Path(), help='增强后的 WAV（默认 <out_dir>/<name>_enhanced.wav）')
@click.option('--uncertainty-csv', type=click.Path(), help='不确定性 CSV（默认 <out_dir>/<name>_uncertainty.csv）')
@click.option('--mean-spec', type=click.Path(), help='后验均值谱（默认 <out_dir>/<name>_mean.spec）')
@common_options
@click.pass_context
def enhance(ctx, input_path, checkpoint, output, uncertainty_csv, mean_spec, config_path, overrides, seed, out):
    """增强一个 WAV 文件并导出每个时频点的不确定性。"""
    config = _load(ctx, config_path, overrides, seed, out)
    out_dir = Path(config.out_dir)
    stem = Path(input_path).stem
    output = Path(output) if output else out_dir / f"{stem}_enhanced.wav"
    uncertainty_csv = Path(uncertainty_csv) if uncertainty_csv else out_dir / f"{stem}_uncertainty.csv"
    mean_spec = Path(mean_spec) if mean_spec else out_dir / f"{stem}_mean.spec"
    result = enhance_file(checkpoint, input_path, output, dsp=config.dsp, uncertainty_csv=uncertainty_csv,
                          mean_spec=mean_spec)
    run = RunManifest(out_dir / f"{stem}.enhance.manifest.jsonl")
    run.append('enhance', input=Path(input_path).name, checkpoint=Path(checkpoint).name,
               output=output.name, uncertainty_csv=uncertainty_csv.name,
               mean_spec=mean_spec.name,
               num_samples=len(result.waveform), config=config.echo())
    click.echo(f"Enhanced: {output}")
    click.echo(f"Uncertainty: {uncertainty_csv}")
    click.echo(f"Posterior mean: {mean_spec}")


@cli.command()
@click.option('--checkpoint', type=click.Path(), help='检查点路径')
@click.option('--oracle', is_flag=True, help='用真值构造的 Wiener 后验代替网络（上界）')
@click.option('--split', default=None, help='评估的清单划分（默认 eval_split）')
@common_options
@click.pass_context
def evaluate(ctx, checkpoint, oracle, split, config_path, overrides, seed, out):
    """在测试划分上评估检查点：指标、稀疏化曲线、AUSE 与热图 CSV。"""
    config = _load(ctx, config_path, overrides, seed, out)
    if checkpoint is None and not oracle:
        raise ConfigurationError("evaluate 需要 --checkpoint 或 --oracle")
    split = split or config.eval.eval_split
    eval_dir = Path(config.out_dir) / (f"eval-{split}-oracle" if oracle else f"eval-{split}")
    result = evaluate_checkpoint(checkpoint, config.data.data_dir, split, eval_dir, config, oracle=oracle)
    _display_evaluation(result)


@cli.command()
@click.argument('eval_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--aggregation', type=click.Choice(['utterance', 'pooled']), default=None,
              help='逐语句平均或合并所有时频点（默认 aggregation）')
@common_options
@click.pass_context
def sparsify(ctx, eval_dir, aggregation, config_path, overrides, seed, out):
    """由评估目录的热图重新计算稀疏化曲线。"""
    config = _load(ctx, config_path, overrides, seed, out)
    aggregation = aggregation or config.eval.aggregation
    frame = sparsify_from_dir(eval_dir, aggregation=aggregation, steps=config.eval.fraction_steps,
                              random_seed=config.eval.random_seed)
    run = RunManifest(Path(eval_dir) / f"sparsify_{aggregation}.manifest.jsonl")
    run.append('sparsify', aggregation=aggregation, steps=config.eval.fraction_steps,
               output=f"sparsification_{aggregation}.csv", rows=len(frame), config=config.echo())
    click.echo(f"\n=== Sparsification ({aggregation}) ===")
    for key, part in frame.groupby('key', sort=False):
        click.echo(f"{key}: rmse@0={part['rmse_predicted'].iloc[0]:.4g} "
                   f"rmse@end predicted={part['rmse_predicted'].iloc[-1]:.4g} "
                   f"oracle={part['rmse_oracle'].iloc[-1]:.4g} random={part['rmse_random'].iloc[-1]:.4g}")


def _display_evaluation(result):
    """Display evaluation results."""
    summary = result.report.aggregate()
    overall = summary[summary['group'] == 'overall'].set_index('metric')
    click.echo(f"\n=== Evaluation Results ===")
    click.echo(f"Utterances: {len(result.report.rows)}")
    for metric in ('si_sdr_in', 'si_sdr_out', 'si_sdr_improvement', 'seg_snr', 'spec_rmse'):
        row = overall.loc[metric]
        click.echo(f"{metric}: {row['mean']:.3f} ± {row['ci95']:.3f}")
    for key in ('aleatoric', 'epistemic', 'total'):
        predicted, random_ause = result.mean_ause(key)
        click.echo(f"AUSE {key}: {predicted:.4g} (random {random_ause:.4g})")
    click.echo(f"Output: {result.out_dir}")


def run(argv: Optional[List[str]] = None) -> int:
    """执行一条命令并返回退出码（不抛出异常）。"""
    try:
        rv = cli.main(args=argv, prog_name='cgmm-enhance', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigurationError as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    except NumericalAbortError as e:
        click.echo(f"Numerical abort: {e}", err=True)
        if e.last_checkpoint:
            click.echo(f"Last good checkpoint: {e.last_checkpoint}", err=True)
        if e.manifest_path:
            click.echo(f"Manifest: {e.manifest_path}", err=True)
        return EXIT_NUMERICAL
    except CgmmEnhanceError as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA
    except OSError as e:
        click.echo(f"I/O error: {e}", err=True)
        return EXIT_DATA
    return rv if isinstance(rv, int) else EXIT_OK


def main():
    """Main entry point."""
    sys.exit(run())


if __name__ == '__main__':
    main()
