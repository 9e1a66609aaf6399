"""
cgmm-enhance 的实用函数。

提供原子写文件、内容哈希、批次划分与耗时格式化等通用工具。
"""

import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, TypeVar, Union

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
PathLike = Union[str, "os.PathLike[str]"]


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """
    原子写文件：先写同目录临时文件，再 rename 覆盖目标。

    参数:
        path: 目标路径
        payload: 文件内容
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def sha256_arrays(arrays: Iterable[np.ndarray]) -> str:
    """按顺序对一组数组的 dtype、形状与小端字节做 sha256。"""
    digest = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        digest.update(str(a.dtype.str).encode())
        digest.update(str(a.shape).encode())
        digest.update(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return digest.hexdigest()


def batch_indices(order: Sequence[T], batch_size: int) -> Iterator[List[T]]:
    """
    Split an ordered sequence into consecutive batches.

    Args:
        order: Items in processing order
        batch_size: Size of each batch (the last one may be shorter)

    Yields:
        Lists of items
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for i in range(0, len(order), batch_size):
        yield list(order[i:i + batch_size])


def format_duration(seconds: float) -> str:
    """
    格式化持续时间为可读格式。

    参数:
        seconds: 持续时间（秒）

    返回:
        格式化的字符串（例如："1小时30分45秒"）
    """
    if seconds < 60:
        return f"{seconds:.1f}秒"

    minutes = int(seconds // 60)
    seconds = seconds % 60

    if minutes < 60:
        return f"{minutes}分{seconds:.1f}秒"

    hours = minutes // 60
    minutes = minutes % 60
    return f"{hours}小时{minutes}分{seconds:.0f}秒"
