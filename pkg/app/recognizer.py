"""
RxExtract v1.0.0 - Recognizer
Toy encoder-decoder transformer turning a segmented region into characters

Forward pass:
    region -> extract_patches -> embed_patches (x W_e + E_pos)
           -> encoder_forward (N layers of MHA + FFNN, residual around each)
           -> decoder_forward (Q', K', V' from the encoder output; non-autoregressive)
           -> project_and_decode (softmax(z W_o + b_o), greedy argmax, cut at EOS)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import CapacityError, ConfigurationError, ShapeError
from app.tensor import Tensor, add, as_tensor, freeze, linear, matmul, relu, softmax_rows

logger = logging.getLogger('rxextract.recognizer')

SPECIAL_TOKENS = ('<pad>', '<eos>', '<unk>')
CHARACTERS = 'abcdefghijklmnopqrstuvwxyz0123456789 -'
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2


class Vocab:
    """
    Character vocabulary: PAD, EOS, UNK, then a-z, 0-9, space, hyphen.
    Ids are dense and stable.
    """

    def __init__(self, characters: str = CHARACTERS):
        self.tokens: Tuple[str, ...] = SPECIAL_TOKENS + tuple(characters)
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary characters must be unique")
        self._ids = {token: index for index, token in enumerate(self.tokens)}
        self.characters = frozenset(characters)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, char: str) -> int:
        if char in SPECIAL_TOKENS:
            raise KeyError(f"{char!r} is a special token, not a character")
        return self._ids.get(char, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, text: str) -> List[int]:
        return [self.id_of(char) for char in text]

    def decode(self, ids: Sequence[int]) -> str:
        """Text up to the first EOS; PAD and UNK dropped."""
        chars = []
        for token_id in ids:
            if token_id == EOS_ID:
                break
            if token_id in (PAD_ID, UNK_ID):
                continue
            chars.append(self.tokens[token_id])
        return ''.join(chars)


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    text: str

    @classmethod
    def from_ids(cls, ids: Sequence[int], vocab: Vocab) -> 'TokenSequence':
        ids = tuple(int(i) for i in ids)
        return cls(ids=ids, text=vocab.decode(ids))

    def to_record(self) -> dict:
        return {'ids': list(self.ids), 'text': self.text}


@dataclass(frozen=True)
class RecognizerConfig:
    patch_size: int = 4
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    max_len: int = 32
    max_patches: int = 256
    ffn_dim: int = 64
    channels: int = 1

    def validate(self):
        for name in ('patch_size', 'd_model', 'heads', 'layers', 'max_len', 'max_patches', 'ffn_dim', 'channels'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model {self.d_model} is not divisible by {self.heads} heads")


@dataclass(frozen=True)
class TransformerLayer:
    """
    One attention + FFNN layer.

    wq, wk, wv: [heads x d x d_k]; w_merge: [d x d], b_merge: [d];
    FFNN: w1 [d x ffn], b1 [ffn], w2 [ffn x d], b2 [d].
    """
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_merge: Tensor
    b_merge: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    FIELDS = ('wq', 'wk', 'wv', 'w_merge', 'b_merge', 'w1', 'b1', 'w2', 'b2')

    @property
    def heads(self) -> int:
        return int(self.wq.shape[0])

    def validate(self, d_model: int, name: str):
        heads, d, d_k = self.wq.shape
        if d != d_model or heads * d_k != d_model:
            raise ShapeError(f"{name}.wq: shape {tuple(self.wq.shape)} does not split d={d_model}")
        for proj in ('wk', 'wv'):
            if getattr(self, proj).shape != self.wq.shape:
                raise ShapeError(f"{name}.{proj}: shape {tuple(getattr(self, proj).shape)} != {tuple(self.wq.shape)}")
        ffn = self.w1.shape[1] if self.w1.ndim == 2 else -1
        expected = {
            'w_merge': (d_model, d_model), 'b_merge': (d_model,),
            'w1': (d_model, ffn), 'b1': (ffn,), 'w2': (ffn, d_model), 'b2': (d_model,),
        }
        for field_name, shape in expected.items():
            if tuple(getattr(self, field_name).shape) != shape:
                raise ShapeError(f"{name}.{field_name}: expected {shape}, got {tuple(getattr(self, field_name).shape)}")


@dataclass(frozen=True)
class RecognizerWeights:
    """
    Every learned tensor of the recognizer: patch projection w_e
    [p^2*C x d], positional table e_pos [max_patches x d], encoder and
    decoder layers, output projection w_out [d x V] and b_out [V].
    """
    w_e: Tensor
    e_pos: Tensor
    encoder: Tuple[TransformerLayer, ...]
    decoder: Tuple[TransformerLayer, ...]
    w_out: Tensor
    b_out: Tensor

    @property
    def d_model(self) -> int:
        return int(self.w_e.shape[1])

    @property
    def patch_dim(self) -> int:
        return int(self.w_e.shape[0])

    @property
    def max_patches(self) -> int:
        return int(self.e_pos.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.w_out.shape[1])

    def validate(self, vocab_size: Optional[int] = None):
        d = self.d_model
        if self.e_pos.ndim != 2 or self.e_pos.shape[1] != d:
            raise ShapeError(f"e_pos: expected [max_patches x {d}], got {tuple(self.e_pos.shape)}")
        if not self.encoder or not self.decoder:
            raise ShapeError("recognizer needs at least one encoder and one decoder layer")
        for index, layer in enumerate(self.encoder):
            layer.validate(d, f"encoder.{index}")
        for index, layer in enumerate(self.decoder):
            layer.validate(d, f"decoder.{index}")
        if self.w_out.ndim != 2 or self.w_out.shape[0] != d:
            raise ShapeError(f"w_out: expected [{d} x V], got {tuple(self.w_out.shape)}")
        if tuple(self.b_out.shape) != (self.vocab_size,):
            raise ShapeError(f"b_out: expected [{self.vocab_size}], got {tuple(self.b_out.shape)}")
        if vocab_size is not None and self.vocab_size != vocab_size:
            raise ShapeError(f"output projection has {self.vocab_size} tokens, vocabulary has {vocab_size}")

    def to_tensors(self) -> Dict[str, Tensor]:
        tensors = {'embed.w_e': self.w_e, 'embed.e_pos': self.e_pos}
        for stack, layers in (('encoder', self.encoder), ('decoder', self.decoder)):
            for index, layer in enumerate(layers):
                for name in TransformerLayer.FIELDS:
                    tensors[f'{stack}.{index}.{name}'] = getattr(layer, name)
        tensors['output.w_out'] = self.w_out
        tensors['output.b_out'] = self.b_out
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, Tensor]) -> 'RecognizerWeights':
        def stack(prefix: str) -> Tuple[TransformerLayer, ...]:
            layers = []
            while f'{prefix}.{len(layers)}.wq' in tensors:
                index = len(layers)
                layers.append(TransformerLayer(**{
                    name: freeze(tensors[f'{prefix}.{index}.{name}']) for name in TransformerLayer.FIELDS
                }))
            return tuple(layers)

        try:
            weights = cls(
                w_e=freeze(tensors['embed.w_e']),
                e_pos=freeze(tensors['embed.e_pos']),
                encoder=stack('encoder'),
                decoder=stack('decoder'),
                w_out=freeze(tensors['output.w_out']),
                b_out=freeze(tensors['output.b_out']),
            )
        except KeyError as e:
            raise ShapeError(f"recognizer weights missing tensor {e.args[0]}")
        weights.validate()
        return weights


@dataclass
class ForwardTrace:
    """Collects every attention matrix and the output probabilities of one pass."""
    attention: List[np.ndarray] = field(default_factory=list)
    probabilities: Optional[np.ndarray] = None

    def softmax_rows(self) -> List[np.ndarray]:
        rows = list(self.attention)
        if self.probabilities is not None:
            rows.append(self.probabilities)
        return rows


def pad_to_multiple(image: Tensor, p: int) -> Tensor:
    """Zero-pad [H x W x C] on the bottom and right to multiples of p."""
    height, width = image.shape[:2]
    pad_h = (-height) % p
    pad_w = (-width) % p
    if not pad_h and not pad_w:
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))


def extract_patches(image: Tensor, p: int) -> Tensor:
    """
    Split [H x W x C] into p x p patches in row-major patch order; each patch
    is flattened in (row, col, channel) order. Returns [n_patches x p*p*C].
    """
    if image.ndim == 2:
        image = image[:, :, None]
    height, width, channels = image.shape
    if height % p or width % p:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {p}")
    grid = image.reshape(height // p, p, width // p, p, channels).transpose(0, 2, 1, 3, 4)
    return as_tensor(grid.reshape(-1, p * p * channels))


def assemble_patches(patches: Tensor, height: int, width: int, p: int, channels: int = 1) -> Tensor:
    """Inverse of extract_patches."""
    grid = patches.reshape(height // p, width // p, p, p, channels).transpose(0, 2, 1, 3, 4)
    return as_tensor(grid.reshape(height, width, channels))


def embed_patches(xs: Tensor, weights: RecognizerWeights) -> Tensor:
    """z_i = x_i W_e + E_pos(i)"""
    n = xs.shape[0]
    if n > weights.max_patches:
        raise CapacityError(f"{n} patches exceed the positional table of {weights.max_patches}")
    return add(matmul(xs, weights.w_e), weights.e_pos[:n])


def multi_head_attention(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         w_merge: Tensor, b_merge: Optional[Tensor] = None,
                         query: Optional[Tensor] = None,
                         trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Scaled dot-product attention per head, heads concatenated and merged.

    Keys and values come from z; queries come from `query` when given,
    otherwise from z as well.
    """
    heads, d, d_k = wq.shape
    if z.shape[1] != d:
        raise ShapeError(f"attention input width {z.shape[1]} != {d}")
    source = z if query is None else query
    scale = 1.0 / math.sqrt(d_k)

    outputs = []
    for h in range(heads):
        q = matmul(source, wq[h])
        k = matmul(z, wk[h])
        v = matmul(z, wv[h])
        scores = (matmul(q, np.ascontiguousarray(k.T)).astype(np.float64) * scale).astype(np.float32)
        weights = softmax_rows(scores)
        if trace is not None:
            trace.attention.append(weights)
        outputs.append(matmul(weights, v))
    return linear(np.concatenate(outputs, axis=1), w_merge, b_merge)


def feed_forward(x: Tensor, layer: TransformerLayer) -> Tensor:
    """linear -> ReLU -> linear"""
    return linear(relu(linear(x, layer.w1, layer.b1)), layer.w2, layer.b2)


def encoder_layer(z: Tensor, layer: TransformerLayer, trace: Optional[ForwardTrace] = None) -> Tensor:
    attended = add(z, multi_head_attention(z, layer.wq, layer.wk, layer.wv,
                                           layer.w_merge, layer.b_merge, trace=trace))
    return add(attended, feed_forward(attended, layer))


def encoder_forward(z0: Tensor, layers: Sequence[TransformerLayer],
                    trace: Optional[ForwardTrace] = None) -> Tensor:
    """N layers of FFNN(MHA(z)) with a residual add around each sublayer."""
    if len(layers) < 1:
        raise ConfigurationError("encoder needs at least one layer")
    z = z0
    for layer in layers:
        z = encoder_layer(z, layer, trace)
    return z


def decoder_layer(h: Tensor, z_enc: Tensor, layer: TransformerLayer,
                  trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Q', K' and V' all derive from the encoder output in every layer; the
    running decoder state only carries the residual and FFNN stream.
    """
    attended = add(h, multi_head_attention(z_enc, layer.wq, layer.wk, layer.wv,
                                           layer.w_merge, layer.b_merge, trace=trace))
    return add(attended, feed_forward(attended, layer))


def select_positions(n: int, max_len: int) -> np.ndarray:
    """Row indices for the output positions: the first max_len rows, cycling when n < max_len."""
    return np.arange(max_len) % n


def decoder_forward(z_enc: Tensor, layers: Sequence[TransformerLayer], max_len: int,
                    trace: Optional[ForwardTrace] = None) -> Tensor:
    """Non-autoregressive decoder; returns [max_len x d]."""
    n = z_enc.shape[0]
    if n < 1:
        raise ShapeError("decoder needs at least one encoder row")
    if len(layers) < 1:
        raise ConfigurationError("decoder needs at least one layer")
    h = z_enc
    for layer in layers:
        h = decoder_layer(h, z_enc, layer, trace)
    return np.ascontiguousarray(h[select_positions(n, max_len)])


def project_and_decode(z_dec: Tensor, weights: RecognizerWeights, vocab: Vocab,
                       trace: Optional[ForwardTrace] = None) -> TokenSequence:
    """softmax(z_dec W_o + b_o) per position, greedy argmax (lowest id on ties), cut at EOS."""
    logits = linear(z_dec, weights.w_out, weights.b_out)
    probabilities = softmax_rows(logits)
    if trace is not None:
        trace.probabilities = probabilities
    # argmax on logits: same order as the probabilities, without softmax rounding ties
    ids = np.argmax(logits, axis=1)
    return TokenSequence.from_ids(ids.tolist(), vocab)


def _as_region(region: Tensor, channels: int) -> Tensor:
    region = as_tensor(region)
    if region.ndim == 2:
        region = region[:, :, None]
    if region.ndim != 3:
        raise ShapeError(f"region must be [H x W] or [H x W x C], got {tuple(region.shape)}")
    if region.shape[0] == 0 or region.shape[1] == 0:
        raise ShapeError(f"region is empty: {tuple(region.shape)}")
    if region.shape[2] != channels:
        raise ShapeError(f"region has {region.shape[2]} channels, recognizer expects {channels}")
    return region


def recognize(region: Tensor, weights: RecognizerWeights, vocab: Vocab, config: RecognizerConfig,
              trace: Optional[ForwardTrace] = None) -> TokenSequence:
    """Full recognizer pass on one region."""
    config.validate()
    padded = pad_to_multiple(_as_region(region, config.channels), config.patch_size)
    patches = extract_patches(padded, config.patch_size)
    if patches.shape[1] != weights.patch_dim:
        raise ShapeError(f"patch vectors have {patches.shape[1]} values, W_e expects {weights.patch_dim}")
    z0 = embed_patches(patches, weights)
    z_enc = encoder_forward(z0, weights.encoder, trace)
    z_dec = decoder_forward(z_enc, weights.decoder, config.max_len, trace)
    return project_and_decode(z_dec, weights, vocab, trace)
