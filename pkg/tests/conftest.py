"""
Shared fixtures: handcrafted detector and recognizer weights whose forward
passes can be evaluated by hand, synthetic lexicons, isolated environment.
"""

import math
import os
import sys
import tempfile

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

# Config classes read the environment at import time
_TMP = tempfile.mkdtemp(prefix='rxextract-tests-')
os.environ['RXEXTRACT_ENV'] = 'testing'
os.environ['RXEXTRACT_ENV_FILE'] = os.path.join(_TMP, 'absent.env')
os.environ['RXEXTRACT_LOG_PATH'] = os.path.join(_TMP, 'logs')
os.environ['RXEXTRACT_REPORT_PATH'] = os.path.join(_TMP, 'reports', 'report.json')

from app.detector import BackboneStage, DetectorWeights  # noqa: E402
from app.matcher import Lexicon, levenshtein  # noqa: E402
from app.recognizer import EOS_ID, RecognizerConfig, RecognizerWeights, TransformerLayer, Vocab  # noqa: E402
from app.tensor import freeze  # noqa: E402

MEDICINES = [
    'panadol', 'augmentin', 'amoxil', 'brufen', 'flagyl', 'ponstan',
    'risek', 'motilium', 'calpol', 'disprin', 'arinac', 'ventolin',
]


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


def zero_detector_weights(channels: int = 2, kernel: int = 1) -> dict:
    """Keyword arguments for an all-zero DetectorWeights."""
    stages = []
    in_channels = 1
    for _ in range(3):
        stages.append(BackboneStage(
            conv1_weight=_zeros(channels, in_channels, 3, 3), conv1_bias=_zeros(channels),
            conv2_weight=_zeros(channels, channels, 3, 3), conv2_bias=_zeros(channels),
        ))
        in_channels = channels
    return {
        'backbone': tuple(stages),
        'laterals': tuple(_zeros(channels, channels, 1, 1) for _ in range(3)),
        'w_s': _zeros(1, channels, kernel, kernel), 'b_s': _zeros(1),
        'w_r': _zeros(4, channels, kernel, kernel), 'b_r': _zeros(4),
        'w_o': _zeros(1, channels, kernel, kernel), 'b_o': _zeros(1),
        'w_b': _zeros(4, channels, kernel, kernel), 'b_b': _zeros(4),
        'w_m': _zeros(1, channels, kernel, kernel), 'b_m': _zeros(1),
    }


@pytest.fixture
def zero_detector():
    return DetectorWeights(**zero_detector_weights())


@pytest.fixture
def band_detector():
    """
    Two-channel detector that fires only on the coarsest level, on cells
    covered by a bright horizontal band.

    For a 64x64 image with ones on rows 16..23, channel 1 of P4 is 1 on row 2
    and channel 1 is 0 everywhere on P3 and P2 (the lateral kernels cancel the
    upsampled term). The RPN box deltas widen anchors x4 and shrink them to a
    quarter height, so every firing proposal clamps to (0, 16, 64, 24).
    """
    kwargs = zero_detector_weights(channels=2)
    lateral_2 = _zeros(2, 2, 1, 1)
    lateral_2[0, 0] = 1.0
    lateral_3 = _zeros(2, 2, 1, 1)
    lateral_3[0, 0] = 1.0
    lateral_3[1, 0] = -1.0
    lateral_4 = _zeros(2, 2, 1, 1)
    lateral_4[0, 0] = 1.0
    lateral_4[1, 0] = 1.0
    kwargs['laterals'] = (lateral_2, lateral_3, lateral_4)

    w_s = _zeros(1, 2, 1, 1)
    w_s[0, 1] = 10.0
    kwargs['w_s'] = w_s
    kwargs['b_s'] = np.array([-5.0], dtype=np.float32)
    kwargs['b_r'] = np.array([0.0, 0.0, math.log(4.0), -math.log(4.0)], dtype=np.float32)
    kwargs['b_m'] = np.array([10.0], dtype=np.float32)
    weights = DetectorWeights(**{k: tuple(v) if isinstance(v, tuple) else freeze(v) for k, v in kwargs.items()})
    weights.validate()
    return weights


@pytest.fixture
def band_image():
    image = np.zeros((64, 64), dtype=np.float32)
    image[16:24, :] = 1.0
    return image


def _zero_layer(d: int, heads: int, ffn: int) -> TransformerLayer:
    d_k = d // heads
    return TransformerLayer(
        wq=_zeros(heads, d, d_k), wk=_zeros(heads, d, d_k), wv=_zeros(heads, d, d_k),
        w_merge=_zeros(d, d), b_merge=_zeros(d),
        w1=_zeros(d, ffn), b1=_zeros(ffn), w2=_zeros(ffn, d), b2=_zeros(d),
    )


def lookup_weights(vocab: Vocab, max_patches: int = 4) -> RecognizerWeights:
    """
    p=4, d=4, one head, one layer each side, L_max=1.

    W_e sends pixel 0 of a patch to unit 0; every attention and FFNN weight
    is zero, so the residual stream carries that unit unchanged. W_o reads
    unit 0 as a vote of 5 for 'a' while b_o gives EOS a standing logit of 1:
    a region whose first patch lights pixel 0 decodes to "a", an all-zero
    region decodes to the empty string.
    """
    w_e = _zeros(16, 4)
    w_e[0, 0] = 1.0
    w_out = _zeros(4, vocab.size)
    w_out[0, vocab.id_of('a')] = 5.0
    b_out = _zeros(vocab.size)
    b_out[EOS_ID] = 1.0
    return RecognizerWeights(
        w_e=w_e, e_pos=_zeros(max_patches, 4),
        encoder=(_zero_layer(4, 1, 4),), decoder=(_zero_layer(4, 1, 4),),
        w_out=w_out, b_out=b_out,
    )


LOOKUP_CONFIG = RecognizerConfig(patch_size=4, d_model=4, heads=1, layers=1, max_len=1, max_patches=4, ffn_dim=4)


@pytest.fixture
def vocab():
    return Vocab()


@pytest.fixture
def lookup(vocab):
    return lookup_weights(vocab)


@pytest.fixture
def lookup_config():
    return LOOKUP_CONFIG


@pytest.fixture
def lookup_factory(vocab):
    def build(max_patches: int = 4) -> RecognizerWeights:
        return lookup_weights(vocab, max_patches)
    return build


@pytest.fixture
def medicine_lexicon():
    return Lexicon.from_entries(MEDICINES)


def spread_entries(count: int, length: int = 8, min_distance: int = 4, seed: int = 0,
                   alphabet: str = 'abcdefghijklmnopqrstuvwxyz'):
    """Random equal-length entries with pairwise Levenshtein distance >= min_distance."""
    rng = np.random.default_rng(seed)
    entries = []
    while len(entries) < count:
        candidate = ''.join(alphabet[i] for i in rng.integers(len(alphabet), size=length))
        if all(levenshtein(candidate, e) >= min_distance for e in entries):
            entries.append(candidate)
    return entries


@pytest.fixture
def spread_lexicon():
    def build(count: int = 200, **kwargs) -> Lexicon:
        return Lexicon.from_entries(spread_entries(count, **kwargs))
    return build


@pytest.fixture
def tmp_lexicon_file(tmp_path):
    path = tmp_path / 'lexicon.csv'
    path.write_text('\n'.join(MEDICINES) + '\n', encoding='utf-8')
    return path


def _dense_bilinear(values, x: float, y: float) -> float:
    """Sum of (1 - |x - x_i|)(1 - |y - y_j|) * value over every grid point, weights clipped at 0."""
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape
    wx = np.maximum(0.0, 1.0 - np.abs(x - np.arange(width)))
    wy = np.maximum(0.0, 1.0 - np.abs(y - np.arange(height)))
    return float(sum(wy[j] * wx[i] * values[j, i] for j in range(height) for i in range(width)))


@pytest.fixture
def dense_bilinear():
    return _dense_bilinear
