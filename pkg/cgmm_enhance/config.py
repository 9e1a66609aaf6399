"""
cgmm-enhance 的配置管理。

配置文件是唯一的事实来源：扁平的 ``key = value`` 文本（``#`` 注释），
或等价的 YAML 映射。命令行 ``--set key=value`` 只覆盖单个键。
所有键登记在由各配置段 dataclass 字段生成的注册表中，未知键直接拒绝。
"""

import dataclasses
import logging
import typing
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import yaml

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

MODELS = ("wf", "cgmm1", "cgmm4", "cgmm4-cons", "cgmm4-pre")
NOISE_KINDS = ("white", "pink", "modulated")


def _doc(default: Any, doc: str):
    """dataclass 字段，附带注册表文档。"""
    if isinstance(default, (list, tuple)):
        return field(default=tuple(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class DspConfig:
    """STFT 分析/合成设置。"""
    sample_rate: int = _doc(16000, "sampling rate in Hz; files at other rates are rejected")
    frame_len: int = _doc(512, "STFT frame length in samples (32 ms at 16 kHz)")
    hop_len: int = _doc(256, "STFT hop in samples; must divide frame_len and be at most frame_len/2")

    @property
    def n_freq(self) -> int:
        return self.frame_len // 2 + 1


@dataclass
class DataConfig:
    """合成语料设置。"""
    data_dir: str = _doc("corpus", "corpus root written by synth-data and read by train/evaluate")
    n_train: int = _doc(200, "number of training utterances")
    n_val: int = _doc(40, "number of validation utterances")
    n_test: int = _doc(40, "number of test utterances")
    duration_s: float = _doc(2.0, "utterance duration in seconds (>= 1)")
    train_snr_min: float = _doc(-5.0, "lower bound of the uniform train/val SNR in dB")
    train_snr_max: float = _doc(20.0, "upper bound of the uniform train/val SNR in dB")
    test_snrs: Tuple[float, ...] = _doc((-10.0, -5.0, 0.0, 5.0, 10.0), "test SNR grid in dB, cycled over the test split")
    noise_kinds: Tuple[str, ...] = _doc(NOISE_KINDS, "noise kinds drawn per utterance")
    workers: int = _doc(1, "worker threads for utterance generation")


@dataclass
class NetSettings:
    """紧凑掩码网络的结构设置（分量数 L 由 model 决定）。"""
    context: int = _doc(3, "input context frames on each side")
    hidden_dims: Tuple[int, ...] = _doc((128, 128), "hidden layer widths")
    leaky_slope: float = _doc(0.2, "leaky-ReLU negative slope")
    feature_norm: str = _doc("utterance", "input feature normalization: utterance | none")


@dataclass
class TrainConfig:
    """优化流程设置。"""
    lr_init: float = _doc(1e-3, "initial Adam learning rate")
    plateau_patience: int = _doc(3, "epochs without validation improvement before halving lr")
    plateau_factor: float = _doc(0.5, "lr multiplier on plateau")
    early_stop_patience: int = _doc(10, "epochs without validation improvement before stopping")
    improvement_tol: float = _doc(1e-6, "validation loss must drop by more than this to count as improvement")
    max_epochs: int = _doc(20, "epoch budget for baseline/CGMM training")
    batch_size: int = _doc(8, "utterances per optimizer step (full-scale value: 64)")
    weight_decay: float = _doc(5e-4, "decoupled weight decay")
    betas: Tuple[float, ...] = _doc((0.5,), "per-component beta of the stop-gradient weighting (one value broadcasts)")
    wta_epochs: int = _doc(24, "constant-lr WTA pre-training epochs (full-scale value: 125)")
    wta_k_halve_every: int = _doc(6, "halve the WTA winner count every N epochs (full-scale value: 25)")
    wta_lr_halve_every: int = _doc(1, "after the constant phase halve lr every N epochs (full-scale value: 5)")
    lr_floor: float = _doc(1e-6, "WTA lr decay stops before dropping below this")
    finetune_lr: float = _doc(1e-5, "initial lr when fine-tuning from a WTA checkpoint")
    grad_clip: str = _doc("auto", "global-norm clipping: auto | on | off (auto = on for CGMM with learned variance)")
    grad_clip_norm: float = _doc(5.0, "global gradient norm bound")


@dataclass
class EvalConfig:
    """评估设置。"""
    fraction_steps: int = _doc(100, "sparsification grid steps (fractions 0, 1/N, ..., (N-1)/N)")
    aggregation: str = _doc("utterance", "sparsification aggregation: utterance | pooled")
    random_seed: int = _doc(0, "seed of the random-ranking baseline curve")
    eval_split: str = _doc("test", "manifest split evaluated by the evaluate command")


@dataclass
class LoggingConfig:
    """Logging configuration."""
    log_level: str = _doc("INFO", "root log level")
    log_format: str = _doc("%(asctime)s - %(name)s - %(levelname)s - %(message)s", "log record format")
    log_file: Optional[str] = _doc(None, "optional log file")
    log_console: bool = _doc(True, "log to the console")
    log_colored: bool = _doc(True, "colour console output when colorlog is available")


SECTIONS = (
    ("dsp", DspConfig),
    ("data", DataConfig),
    ("net", NetSettings),
    ("train", TrainConfig),
    ("eval", EvalConfig),
    ("logging", LoggingConfig),
)

# 只描述文件位置的键，不进入清单与检查点的配置回显
LOCATION_KEYS = ("out_dir", "data_dir", "log_file")

TOP_LEVEL_DOCS = {
    "model": "model variant: " + " | ".join(MODELS),
    "seed": "master seed for corpus generation, initialization and data order",
    "out_dir": "directory for checkpoints, manifests and reports",
}


@dataclass
class Config:
    """主配置类。"""
    model: str = "cgmm4"
    seed: int = 1
    out_dir: str = "runs"
    dsp: DspConfig = field(default_factory=DspConfig)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetSettings = field(default_factory=NetSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @classmethod
    def from_file(cls, config_path: str) -> "Config":
        """从扁平 key=value 文件或 YAML 文件加载配置。"""
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"配置文件不存在: {config_path}")
        config = cls()
        if path.suffix.lower() in (".yaml", ".yml"):
            try:
                with open(path, "r", encoding="utf-8") as f:
                    data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigurationError(f"加载配置文件失败 {config_path}: {e}") from e
            if data is None:
                data = {}
            if not isinstance(data, dict):
                raise ConfigurationError(f"配置文件顶层必须是映射: {config_path}")
            for key, value in _flatten_yaml(data).items():
                config.set(key, value)
        else:
            with open(path, "r", encoding="utf-8") as f:
                for key, value in parse_flat_lines(f, source=str(path)):
                    config.set(key, value)
        config.validate()
        logger.debug(f"已加载配置 {config_path}")
        return config

    def set(self, key: str, value: Any) -> None:
        """按注册表设置单个键，值按字段类型转换。"""
        registry = key_registry()
        if key not in registry:
            raise ConfigurationError(f"未知配置键: {key}")
        section, type_hint = registry[key]
        target = self if section is None else getattr(self, section)
        setattr(target, key, coerce_value(key, value, type_hint))

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """应用 ``key=value`` 形式的命令行覆盖。"""
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError(f"覆盖项必须是 key=value 形式: {item!r}")
            key, value = item.split("=", 1)
            self.set(key.strip(), value.strip())
        self.validate()

    def validate(self) -> None:
        """检查跨字段约束。"""
        if self.model not in MODELS:
            raise ConfigurationError(f"model 必须是 {MODELS} 之一，得到 {self.model!r}")
        d = self.dsp
        if d.sample_rate <= 0 or d.frame_len <= 0 or d.hop_len <= 0:
            raise ConfigurationError("sample_rate / frame_len / hop_len 必须为正")
        if d.frame_len % d.hop_len != 0:
            raise ConfigurationError(f"hop_len={d.hop_len} 必须整除 frame_len={d.frame_len}")
        if d.hop_len > d.frame_len // 2:
            raise ConfigurationError(f"hop_len={d.hop_len} 不能超过 frame_len/2（COLA）")
        data = self.data
        if data.duration_s < 1.0:
            raise ConfigurationError("duration_s 必须 >= 1")
        if min(data.n_train, data.n_val, data.n_test) < 0:
            raise ConfigurationError("语料规模不能为负")
        if data.train_snr_min > data.train_snr_max:
            raise ConfigurationError("train_snr_min 不能大于 train_snr_max")
        for kind in data.noise_kinds:
            if kind not in NOISE_KINDS:
                raise ConfigurationError(f"未知噪声类型: {kind}")
        if not self.net.hidden_dims or any(h <= 0 for h in self.net.hidden_dims):
            raise ConfigurationError("hidden_dims 必须非空且为正")
        if self.net.context < 0:
            raise ConfigurationError("context 不能为负")
        if self.net.feature_norm not in ("utterance", "none"):
            raise ConfigurationError(f"feature_norm 必须是 utterance 或 none: {self.net.feature_norm}")
        t = self.train
        for name in ("lr_init", "plateau_factor", "lr_floor", "finetune_lr", "grad_clip_norm"):
            if getattr(t, name) <= 0:
                raise ConfigurationError(f"{name} 必须为正")
        if t.weight_decay < 0:
            raise ConfigurationError("weight_decay 不能为负")
        if t.batch_size < 1 or t.max_epochs < 1:
            raise ConfigurationError("batch_size 与 max_epochs 至少为 1")
        if t.wta_k_halve_every < 1 or t.wta_lr_halve_every < 1:
            raise ConfigurationError("WTA 调度间隔至少为 1")
        if not t.betas or any(not 0.0 <= b <= 1.0 for b in t.betas):
            raise ConfigurationError(f"betas 必须位于 [0, 1]: {t.betas}")
        if t.grad_clip not in ("auto", "on", "off"):
            raise ConfigurationError(f"grad_clip 必须是 auto / on / off: {t.grad_clip}")
        if self.eval.aggregation not in ("utterance", "pooled"):
            raise ConfigurationError(f"aggregation 必须是 utterance 或 pooled: {self.eval.aggregation}")
        if self.eval.fraction_steps < 1:
            raise ConfigurationError("fraction_steps 至少为 1")

    def to_flat(self) -> Dict[str, Any]:
        """扁平化为 {key: value}，用于清单与检查点回显。"""
        flat: Dict[str, Any] = {"model": self.model, "seed": self.seed, "out_dir": self.out_dir}
        for section, _ in SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                flat[k] = list(v) if isinstance(v, tuple) else v
        return flat

    def echo(self) -> Dict[str, Any]:
        """不含位置键的扁平配置；同一配置在不同目录运行时回显一致。"""
        return {k: v for k, v in self.to_flat().items() if k not in LOCATION_KEYS}

    def to_dict(self) -> Dict[str, Any]:
        """按配置段嵌套的字典（YAML 输出）。"""
        out: Dict[str, Any] = {"model": self.model, "seed": self.seed, "out_dir": self.out_dir}
        for section, _ in SECTIONS:
            out[section] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in asdict(getattr(self, section)).items()}
        return out

    def save_to_file(self, config_path: str) -> None:
        """保存为扁平文本或 YAML（按扩展名）。"""
        path = Path(config_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() in (".yaml", ".yml"):
            content = yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=False)
        else:
            content = render_flat(self)
        path.write_text(content, encoding="utf-8")
        logger.info(f"Configuration saved to {config_path}")

    def component_count(self) -> int:
        """模型对应的分量数 L。"""
        return 1 if self.model in ("wf", "cgmm1") else 4


def key_registry() -> Dict[str, Tuple[Optional[str], Any]]:
    """扁平键 -> (配置段名, 类型)。顶层键的配置段为 None。"""
    registry: Dict[str, Tuple[Optional[str], Any]] = {}
    top_hints = typing.get_type_hints(Config)
    for key in TOP_LEVEL_DOCS:
        registry[key] = (None, top_hints[key])
    for section, cls in SECTIONS:
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name in registry:
                raise ConfigurationError(f"配置键重复: {f.name}")
            registry[f.name] = (section, hints[f.name])
    return registry


def key_docs() -> Dict[str, str]:
    docs = dict(TOP_LEVEL_DOCS)
    for _, cls in SECTIONS:
        for f in fields(cls):
            docs[f.name] = f.metadata.get("doc", "")
    return docs


def parse_flat_lines(lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, str]]:
    """解析 ``key = value`` 行；``#`` 之后为注释。"""
    pairs: List[Tuple[str, str]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: 缺少 '=': {raw.rstrip()}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def coerce_value(key: str, value: Any, type_hint: Any) -> Any:
    """把字符串或 YAML 值转换成字段声明的类型。"""
    origin = typing.get_origin(type_hint)
    args = typing.get_args(type_hint)
    try:
        if origin is typing.Union and type(None) in args:
            if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
                return None
            inner = next(a for a in args if a is not type(None))
            return coerce_value(key, value, inner)
        if origin in (tuple, Tuple):
            item_type = args[0]
            if isinstance(value, str):
                items = [v.strip() for v in value.strip("[]()").split(",") if v.strip()]
            elif isinstance(value, (list, tuple)):
                items = list(value)
            else:
                items = [value]
            return tuple(coerce_value(key, item, item_type) for item in items)
        if type_hint is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "yes", "on", "1"):
                return True
            if text in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if type_hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if type_hint is float:
            return float(value)
        if type_hint is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"配置键 {key} 的值 {value!r} 无效: {e}") from e
    raise ConfigurationError(f"配置键 {key} 的类型不受支持: {type_hint}")


def _flatten_yaml(data: Dict[str, Any]) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    section_names = {name for name, _ in SECTIONS}
    for key, value in data.items():
        if key in section_names and isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def render_flat(config: Config) -> str:
    """渲染为带注释的扁平配置文本。"""
    docs = key_docs()
    flat = config.to_flat()
    lines = ["# cgmm-enhance configuration", "# flat `key = value` lines; `#` starts a comment", ""]

    def emit(key: str) -> None:
        value = flat[key]
        if isinstance(value, list):
            text = ", ".join(str(v) for v in value)
        elif value is None:
            text = "none"
        else:
            text = str(value)
        lines.append(f"# {docs[key]}")
        lines.append(f"{key} = {text}")

    for key in TOP_LEVEL_DOCS:
        emit(key)
    for section, cls in SECTIONS:
        lines.append("")
        lines.append(f"# ---- {section} ----")
        for f in fields(cls):
            emit(f.name)
    return "\n".join(lines) + "\n"


def create_sample_config(fmt: str = "cfg") -> str:
    """Create a sample configuration file content."""
    config = Config()
    if fmt == "yaml":
        return yaml.safe_dump(config.to_dict(), default_flow_style=False, sort_keys=False)
    return render_flat(config)


def load_config(config_path: Optional[str] = None,
                overrides: Iterable[str] = (),
                seed: Optional[int] = None,
                out_dir: Optional[str] = None) -> Config:
    """
    加载配置并应用命令行覆盖。

    参数:
        config_path: 配置文件路径；为空时使用默认配置
        overrides: ``key=value`` 覆盖项
        seed: ``--seed`` 的简写覆盖
        out_dir: ``--out`` 的简写覆盖

    返回:
        校验通过的 Config
    """
    config = Config.from_file(config_path) if config_path else Config()
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    if out_dir is not None:
        overrides.append(f"out_dir={out_dir}")
    config.apply_overrides(overrides)
    return config


def setup_logging(config: LoggingConfig):
    """Setup logging based on configuration."""
    try:
        import colorlog
        colorlog_available = True
    except ImportError:
        colorlog_available = False

    level = getattr(logging, config.log_level.upper(), logging.INFO)

    if config.log_colored and config.log_console and colorlog_available:
        console_formatter = colorlog.ColoredFormatter(
            '%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S',
            log_colors={
                'DEBUG': 'cyan',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'red,bg_white',
            }
        )
    else:
        console_formatter = logging.Formatter(config.log_format)

    file_formatter = logging.Formatter(config.log_format)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    if config.log_console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(console_formatter)
        root_logger.addHandler(console_handler)

    if config.log_file:
        try:
            log_dir = Path(config.log_file).parent
            log_dir.mkdir(parents=True, exist_ok=True)

            file_handler = logging.FileHandler(config.log_file)
            file_handler.setLevel(level)
            file_handler.setFormatter(file_formatter)
            root_logger.addHandler(file_handler)
        except OSError as e:
            logger.error(f"Failed to setup file logging: {e}")

    for noisy in ("matplotlib", "numba", "soundfile"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def replace_section(config: Config, section: str, **changes: Any) -> Config:
    """返回替换了某个配置段字段的新 Config（原对象不变）。"""
    new_section = dataclasses.replace(getattr(config, section), **changes)
    return dataclasses.replace(config, **{section: new_section})
