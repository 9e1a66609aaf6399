import numpy as np
import pytest

from cgmm_enhance.config import Config
from cgmm_enhance.data import Utterance
from cgmm_enhance.dsp import ComplexSpectrogram

TOY_FRAME = 8
TOY_HOP = 4
TOY_BINS = TOY_FRAME // 2 + 1


def toy_utterance(uid, X, S, snr_db=0.0):
    return Utterance(
        uid=uid,
        noisy=ComplexSpectrogram(X, TOY_FRAME, TOY_HOP, 16000),
        clean=ComplexSpectrogram(S, TOY_FRAME, TOY_HOP, 16000),
        snr_db=snr_db,
    )


def random_spectrum(rng, n_frames=6):
    return rng.standard_normal((TOY_BINS, n_frames)) + 1j * rng.standard_normal((TOY_BINS, n_frames))


@pytest.fixture
def tiny_config(tmp_path):
    """toy 频点数、极小网络的配置，输出到临时目录。"""
    config = Config()
    for key, value in (
        ("frame_len", TOY_FRAME),
        ("hop_len", TOY_HOP),
        ("hidden_dims", "8"),
        ("context", 1),
        ("batch_size", 2),
        ("max_epochs", 5),
        ("out_dir", str(tmp_path / "runs")),
    ):
        config.set(key, value)
    config.validate()
    return config
