import numpy as np
import pytest

from cgmm_enhance.exceptions import (
    AudioFormatError,
    CgmmEnhanceError,
    DataError,
    EvaluationError,
    NumericalAbortError,
)
from cgmm_enhance.utils import atomic_write_bytes, batch_indices, format_duration, sha256_arrays


def test_custom_exceptions_not_builtin():
    assert issubclass(AudioFormatError, DataError)
    assert issubclass(DataError, CgmmEnhanceError)
    assert EvaluationError is not ArithmeticError
    err = NumericalAbortError("nan", last_checkpoint="wf.ckpt", manifest_path="wf.manifest.jsonl")
    assert isinstance(err, CgmmEnhanceError)
    assert err.last_checkpoint == "wf.ckpt"
    assert err.manifest_path == "wf.manifest.jsonl"


def test_batch_indices():
    assert list(batch_indices([3, 1, 4, 1, 5], 2)) == [[3, 1], [4, 1], [5]]
    assert list(batch_indices([], 4)) == []
    with pytest.raises(ValueError):
        list(batch_indices([1], 0))


def test_sha256_arrays_sees_dtype_shape_and_order():
    a = np.arange(6, dtype=np.float64)
    base = sha256_arrays([a])
    assert base == sha256_arrays([a.copy()])
    assert len(base) == 64
    assert base != sha256_arrays([a.reshape(2, 3)])
    assert base != sha256_arrays([a.astype(np.float32)])
    assert sha256_arrays([a, a + 1]) != sha256_arrays([a + 1, a])


def test_atomic_write_replaces_file(tmp_path):
    target = tmp_path / "nested" / "out.bin"
    atomic_write_bytes(target, b"first")
    atomic_write_bytes(target, b"second")
    assert target.read_bytes() == b"second"
    assert [p.name for p in target.parent.iterdir()] == ["out.bin"]


def test_format_duration():
    assert format_duration(5.0) == "5.0秒"
    assert format_duration(90) == "1分30.0秒"
    assert format_duration(3725) == "1小时2分5秒"
