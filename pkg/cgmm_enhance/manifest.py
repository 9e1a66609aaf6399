"""
运行清单（RunManifest）：只追加的 JSON lines 文件。

每条记录带 ``event`` 字段（run_start / epoch / checkpoint / run_end / abort …）。
墙钟相关的键在 ``stable()`` 中被剔除，用于比较两次运行是否一致。
"""

import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Union

from .exceptions import DataError

logger = logging.getLogger(__name__)

WALL_CLOCK_KEYS = frozenset({"timestamp", "elapsed_s", "wall_clock_s"})


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


class RunManifest:
    """只追加的运行记录。"""

    def __init__(self, path: Union[str, Path], fresh: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if fresh and self.path.exists():
            self.path.unlink()
        self._started = time.time()

    def append(self, event: str, **fields: Any) -> Dict[str, Any]:
        """追加一条记录并立即落盘。"""
        record = {"event": event}
        record.update(_jsonable(fields))
        record["timestamp"] = time.time()
        record["elapsed_s"] = round(record["timestamp"] - self._started, 6)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def records(self) -> List[Dict[str, Any]]:
        return read_manifest(self.path)

    def stable(self) -> List[Dict[str, Any]]:
        return stable_records(self.records())

    def __repr__(self) -> str:
        return f"RunManifest({str(self.path)!r})"


def read_manifest(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """读取 JSON lines 清单。"""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if line.strip():
                    records.append(json.loads(line))
    except FileNotFoundError as e:
        raise DataError(f"清单不存在: {path}") from e
    except ValueError as e:
        raise DataError(f"清单 {path} 第 {lineno} 行损坏: {e}") from e
    return records


def stable_records(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """去掉墙钟字段后的记录。"""
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_KEYS} for r in records]
