"""
RxExtract v1.0.0 - Weight Files
RXW1 binary codec, weight bundles and seeded initialisation

RXW1 layout (little-endian):
    "RXW1"                     4 bytes magic
    u32 count                  number of tensors
    per tensor:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 dims
        f32 payload, row-major

One bundle file carries both models; tensor names are prefixed with
"detector." or "recognizer.".
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from app.detector import BACKBONE_STAGES, BackboneStage, DetectorWeights
from app.errors import FormatError, ShapeError
from app.recognizer import RecognizerConfig, RecognizerWeights, TransformerLayer
from app.tensor import Tensor, freeze

logger = logging.getLogger('rxextract.weights')

MAGIC = b'RXW1'
DETECTOR_PREFIX = 'detector.'
RECOGNIZER_PREFIX = 'recognizer.'

_HEADER = struct.Struct('<4sI')
_NAME_LEN = struct.Struct('<H')
_RANK = struct.Struct('<B')


# ==================== CODEC ====================

def encode_tensors(tensors: Dict[str, Tensor]) -> bytes:
    """Serialise named tensors in insertion order."""
    chunks = [_HEADER.pack(MAGIC, len(tensors))]
    for name, tensor in tensors.items():
        array = np.asarray(tensor)
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]}...")
        if array.ndim > 0xFF:
            raise FormatError(f"tensor {name} has rank {array.ndim}, limit is 255")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_RANK.pack(array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(chunks)


class _Reader:
    """Bounds-checked cursor over an RXW1 buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def decode_tensors(data: bytes) -> Dict[str, Tensor]:
    """Parse an RXW1 buffer into named tensors, in file order."""
    reader = _Reader(data)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=0)
    magic, count = reader.unpack(_HEADER, 'header')
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)

    tensors: Dict[str, Tensor] = {}
    for index in range(count):
        name_offset = reader.offset
        (name_len,) = reader.unpack(_NAME_LEN, f'name length of tensor {index}')
        try:
            name = reader.take(name_len, f'name of tensor {index}').decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(f"tensor {index} name is not UTF-8", offset=name_offset)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", offset=name_offset)

        (rank,) = reader.unpack(_RANK, f'rank of {name}')
        shape = struct.unpack(f'<{rank}I', reader.take(4 * rank, f'dims of {name}'))
        elements = math.prod(shape)
        remaining = len(data) - reader.offset
        if 4 * elements > remaining:
            raise FormatError(f"{name}: dims {list(shape)} need {4 * elements} payload bytes, {remaining} remain",
                              offset=reader.offset)
        payload = reader.take(4 * elements, f'payload of {name}')
        if elements == 0:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(shape)

    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after {count} tensors", offset=reader.offset)
    return tensors


def save_tensors(tensors: Dict[str, Tensor], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_tensors(tensors))
    logger.info(f"Wrote {len(tensors)} tensors to {path}")


def load_tensors(path: Union[str, Path]) -> Dict[str, Tensor]:
    with open(path, 'rb') as f:
        return decode_tensors(f.read())


# ==================== BUNDLES ====================

@dataclass(frozen=True)
class WeightBundle:
    """Detector and recognizer weights stored in one RXW1 file."""
    detector: Optional[DetectorWeights] = None
    recognizer: Optional[RecognizerWeights] = None

    def to_tensors(self) -> Dict[str, Tensor]:
        tensors: Dict[str, Tensor] = {}
        if self.detector is not None:
            for name, tensor in self.detector.to_tensors().items():
                tensors[DETECTOR_PREFIX + name] = tensor
        if self.recognizer is not None:
            for name, tensor in self.recognizer.to_tensors().items():
                tensors[RECOGNIZER_PREFIX + name] = tensor
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, Tensor]) -> 'WeightBundle':
        detector = {k[len(DETECTOR_PREFIX):]: v for k, v in tensors.items() if k.startswith(DETECTOR_PREFIX)}
        recognizer = {k[len(RECOGNIZER_PREFIX):]: v for k, v in tensors.items() if k.startswith(RECOGNIZER_PREFIX)}
        unknown = [k for k in tensors if not k.startswith((DETECTOR_PREFIX, RECOGNIZER_PREFIX))]
        if unknown:
            raise ShapeError(f"tensors outside the detector/recognizer namespaces: {unknown[:3]}")
        return cls(
            detector=DetectorWeights.from_tensors(detector) if detector else None,
            recognizer=RecognizerWeights.from_tensors(recognizer) if recognizer else None,
        )

    def require_detector(self) -> DetectorWeights:
        if self.detector is None:
            raise ShapeError("weight file has no detector tensors")
        return self.detector

    def require_recognizer(self) -> RecognizerWeights:
        if self.recognizer is None:
            raise ShapeError("weight file has no recognizer tensors")
        return self.recognizer


def save_weights(weights: Union[WeightBundle, DetectorWeights, RecognizerWeights], path: Union[str, Path]):
    if isinstance(weights, DetectorWeights):
        weights = WeightBundle(detector=weights)
    elif isinstance(weights, RecognizerWeights):
        weights = WeightBundle(recognizer=weights)
    save_tensors(weights.to_tensors(), path)


def load_weights(path: Union[str, Path]) -> WeightBundle:
    return WeightBundle.from_tensors(load_tensors(path))


# ==================== INITIALISATION ====================

def _uniform(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return freeze(rng.uniform(-scale, scale, size=shape).astype(np.float32))


def init_detector_weights(rng: np.random.Generator, channels: int, scale: float = 0.02,
                          input_channels: int = 1, kernel: int = 3) -> DetectorWeights:
    """Draw every detector tensor from uniform(-scale, scale) in a fixed order."""
    k = kernel
    stages = []
    in_channels = input_channels
    for _ in range(BACKBONE_STAGES):
        stages.append(BackboneStage(
            conv1_weight=_uniform(rng, (channels, in_channels, k, k), scale),
            conv1_bias=_uniform(rng, (channels,), scale),
            conv2_weight=_uniform(rng, (channels, channels, k, k), scale),
            conv2_bias=_uniform(rng, (channels,), scale),
        ))
        in_channels = channels
    laterals = tuple(_uniform(rng, (channels, channels, 1, 1), scale) for _ in range(BACKBONE_STAGES))

    heads = {}
    for name, out in (('s', 1), ('r', 4), ('o', 1), ('b', 4), ('m', 1)):
        heads[f'w_{name}'] = _uniform(rng, (out, channels, k, k), scale)
        heads[f'b_{name}'] = _uniform(rng, (out,), scale)

    weights = DetectorWeights(backbone=tuple(stages), laterals=laterals, **heads)
    weights.validate()
    return weights


def init_recognizer_weights(rng: np.random.Generator, config: RecognizerConfig,
                            vocab_size: int, scale: float = 0.02) -> RecognizerWeights:
    """Draw every recognizer tensor from uniform(-scale, scale) in a fixed order."""
    config.validate()
    d = config.d_model
    d_k = d // config.heads

    def layer() -> TransformerLayer:
        return TransformerLayer(
            wq=_uniform(rng, (config.heads, d, d_k), scale),
            wk=_uniform(rng, (config.heads, d, d_k), scale),
            wv=_uniform(rng, (config.heads, d, d_k), scale),
            w_merge=_uniform(rng, (d, d), scale),
            b_merge=_uniform(rng, (d,), scale),
            w1=_uniform(rng, (d, config.ffn_dim), scale),
            b1=_uniform(rng, (config.ffn_dim,), scale),
            w2=_uniform(rng, (config.ffn_dim, d), scale),
            b2=_uniform(rng, (d,), scale),
        )

    patch_dim = config.patch_size * config.patch_size * config.channels
    w_e = _uniform(rng, (patch_dim, d), scale)
    e_pos = _uniform(rng, (config.max_patches, d), scale)
    encoder = tuple(layer() for _ in range(config.layers))
    decoder = tuple(layer() for _ in range(config.layers))
    w_out = _uniform(rng, (d, vocab_size), scale)
    b_out = _uniform(rng, (vocab_size,), scale)

    weights = RecognizerWeights(w_e=w_e, e_pos=e_pos, encoder=encoder, decoder=decoder, w_out=w_out, b_out=b_out)
    weights.validate(vocab_size)
    return weights


def init_weights(seed: int, channels: int, recognizer_config: RecognizerConfig,
                 vocab_size: int, scale: float = 0.02) -> WeightBundle:
    """
    Seeded random weights for both models.

    The detector draws first, then the recognizer, from one generator, so
    a seed fully determines the bundle bytes.
    """
    rng = np.random.default_rng(seed)
    detector = init_detector_weights(rng, channels, scale, input_channels=recognizer_config.channels)
    recognizer = init_recognizer_weights(rng, recognizer_config, vocab_size, scale)
    logger.info(f"Initialised weights from seed {seed} (scale {scale})")
    return WeightBundle(detector=detector, recognizer=recognizer)
