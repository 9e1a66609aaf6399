"""
cgmm-enhance 的自定义异常。

为不同错误条件定义特定的异常类型。CLI 按异常类型映射退出码。
注意：不使用 ValueError / ArithmeticError 之类的内置名称，以免混淆。
"""

from typing import Optional


class CgmmEnhanceError(Exception):
    """cgmm-enhance 的基础异常。"""
    pass


class ConfigurationError(CgmmEnhanceError):
    """配置无效（未知键、无法解析的值）时抛出。"""
    pass


class DataError(CgmmEnhanceError):
    """语料、清单或输入数据有问题时抛出。"""
    pass


class AudioFormatError(DataError):
    """WAV 头损坏、编码不支持、多声道或采样率不符时抛出。"""
    pass


class SignalError(CgmmEnhanceError):
    """STFT/iSTFT 前置条件不满足时抛出。"""
    pass


class PosteriorError(CgmmEnhanceError):
    """先验或后验参数违反不变量时抛出。"""
    pass


class LossError(CgmmEnhanceError):
    """损失函数的前置条件（L、K、β、方差下限）不满足时抛出。"""
    pass


class NetworkError(CgmmEnhanceError):
    """网络配置无效或 tape 与参数不匹配时抛出。"""
    pass


class CheckpointError(CgmmEnhanceError):
    """检查点文件损坏或与网络配置不兼容时抛出。"""
    pass


class EvaluationError(CgmmEnhanceError):
    """评估输入形状不符或参考信号为零时抛出。"""
    pass


class NumericalAbortError(CgmmEnhanceError):
    """损失或梯度出现非有限值，训练中止时抛出。"""

    def __init__(self, message: str,
                 last_checkpoint: Optional[str] = None,
                 manifest_path: Optional[str] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.manifest_path = manifest_path
