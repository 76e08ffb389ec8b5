"""
RxExtract v1.0.0 - Detector
Toy instance segmentation of medicine-name regions

Dataflow:
    image -> toy_backbone (3 residual stages) -> fpn_merge -> rpn_forward
          -> proposals -> roi_align -> detect_heads -> nms -> Detections

Fixed choices:
- Pyramid levels 2, 3, 4 at strides 2, 4, 8
- One square anchor per feature cell, side = 4 x stride
- RoI Align samples one point per bin, at the bin centre
- Head score and box are global-average pooled before the readout
- Mask binarised at strictly greater than 0.5
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ConfigurationError, DegenerateBoxError, ShapeError
from app.geometry import Box, box_iou, clamp_box, paste_mask, rle_encode
from app.tensor import (
    Tensor, add, as_tensor, bilinear_sample_channels, conv2d, freeze,
    max_pool_2x, sigmoid_map, upsample_nearest_2x,
)

logger = logging.getLogger('rxextract.detector')

# First pyramid level index; level l has stride 2 ** (l - 1)
FIRST_LEVEL = 2
BACKBONE_STAGES = 3

# Same clamp torchvision applies to dw/dh before exp()
DELTA_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BackboneStage:
    """One residual stage: y = conv2(conv1(x)) + x, then 2x max-pool."""
    conv1_weight: Tensor
    conv1_bias: Tensor
    conv2_weight: Tensor
    conv2_bias: Tensor


@dataclass(frozen=True)
class DetectorWeights:
    """
    Every learned tensor of the detector.

    laterals[i] is W_l for pyramid level FIRST_LEVEL + i. The RPN weights
    (w_s, b_s, w_r, b_r) are shared by all levels. Head weights: w_o/b_o
    objectness, w_b/b_b box refinement, w_m/b_m mask.
    """
    backbone: Tuple[BackboneStage, ...]
    laterals: Tuple[Tensor, ...]
    w_s: Tensor
    b_s: Tensor
    w_r: Tensor
    b_r: Tensor
    w_o: Tensor
    b_o: Tensor
    w_b: Tensor
    b_b: Tensor
    w_m: Tensor
    b_m: Tensor

    @property
    def channels(self) -> int:
        return int(self.backbone[0].conv1_weight.shape[0])

    @property
    def input_channels(self) -> int:
        return int(self.backbone[0].conv1_weight.shape[1])

    def validate(self):
        """Raise ShapeError unless every tensor agrees with the channel count."""
        c = self.channels
        if len(self.backbone) != BACKBONE_STAGES:
            raise ShapeError(f"expected {BACKBONE_STAGES} backbone stages, got {len(self.backbone)}")
        if len(self.laterals) != BACKBONE_STAGES:
            raise ShapeError(f"expected {BACKBONE_STAGES} lateral kernels, got {len(self.laterals)}")

        in_channels = self.input_channels
        for index, stage in enumerate(self.backbone):
            _expect(stage.conv1_weight, (c, in_channels), f"backbone.{index}.conv1")
            _expect(stage.conv2_weight, (c, c), f"backbone.{index}.conv2")
            _expect_bias(stage.conv1_bias, c, f"backbone.{index}.conv1")
            _expect_bias(stage.conv2_bias, c, f"backbone.{index}.conv2")
            in_channels = c
        for index, lateral in enumerate(self.laterals):
            _expect(lateral, (c, c), f"lateral.{index}")

        for name, weight, bias, out in (
            ('rpn.score', self.w_s, self.b_s, 1), ('rpn.bbox', self.w_r, self.b_r, 4),
            ('head.score', self.w_o, self.b_o, 1), ('head.bbox', self.w_b, self.b_b, 4),
            ('head.mask', self.w_m, self.b_m, 1),
        ):
            _expect(weight, (out, c), name)
            _expect_bias(bias, out, name)

    def to_tensors(self) -> Dict[str, Tensor]:
        tensors: Dict[str, Tensor] = {}
        for index, stage in enumerate(self.backbone):
            tensors[f'backbone.{index}.conv1.weight'] = stage.conv1_weight
            tensors[f'backbone.{index}.conv1.bias'] = stage.conv1_bias
            tensors[f'backbone.{index}.conv2.weight'] = stage.conv2_weight
            tensors[f'backbone.{index}.conv2.bias'] = stage.conv2_bias
        for index, lateral in enumerate(self.laterals):
            tensors[f'fpn.lateral.{index}'] = lateral
        for name in ('w_s', 'b_s', 'w_r', 'b_r', 'w_o', 'b_o', 'w_b', 'b_b', 'w_m', 'b_m'):
            tensors[f'heads.{name}'] = getattr(self, name)
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, Tensor]) -> 'DetectorWeights':
        try:
            backbone = tuple(
                BackboneStage(
                    conv1_weight=freeze(tensors[f'backbone.{i}.conv1.weight']),
                    conv1_bias=freeze(tensors[f'backbone.{i}.conv1.bias']),
                    conv2_weight=freeze(tensors[f'backbone.{i}.conv2.weight']),
                    conv2_bias=freeze(tensors[f'backbone.{i}.conv2.bias']),
                )
                for i in range(BACKBONE_STAGES)
            )
            laterals = tuple(freeze(tensors[f'fpn.lateral.{i}']) for i in range(BACKBONE_STAGES))
            heads = {
                name: freeze(tensors[f'heads.{name}'])
                for name in ('w_s', 'b_s', 'w_r', 'b_r', 'w_o', 'b_o', 'w_b', 'b_b', 'w_m', 'b_m')
            }
        except KeyError as e:
            raise ShapeError(f"detector weights missing tensor {e.args[0]}")
        weights = cls(backbone=backbone, laterals=laterals, **heads)
        weights.validate()
        return weights


def _expect(kernel: Tensor, leading: Tuple[int, int], name: str):
    if kernel.ndim != 4 or tuple(kernel.shape[:2]) != leading or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"{name}: expected kernel [{leading[0]} x {leading[1]} x k x k], got {tuple(kernel.shape)}")


def _expect_bias(bias: Tensor, size: int, name: str):
    if tuple(bias.shape) != (size,):
        raise ShapeError(f"{name}: expected bias [{size}], got {tuple(bias.shape)}")


@dataclass(frozen=True)
class DetectorConfig:
    proposal_threshold: float = 0.7
    nms_iou: float = 0.5
    roi_size: int = 8

    def validate(self):
        if not 0.0 <= self.proposal_threshold <= 1.0:
            raise ConfigurationError(f"proposal threshold {self.proposal_threshold} outside [0, 1]")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigurationError(f"NMS IoU threshold {self.nms_iou} outside (0, 1)")
        if self.roi_size < 1:
            raise ConfigurationError(f"RoI size must be at least 1, got {self.roi_size}")


@dataclass(frozen=True)
class PyramidLevels:
    """Feature maps ordered by ascending level index (finest first)."""
    levels: Tuple[Tuple[int, Tensor], ...]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("pyramid has no levels")
        channels = self.levels[0][1].shape[0]
        for (index, fine), (next_index, coarse) in zip(self.levels, self.levels[1:]):
            if next_index != index + 1:
                raise ShapeError(f"pyramid levels {index} and {next_index} are not adjacent")
            if fine.shape[1] != coarse.shape[1] * 2 or fine.shape[2] != coarse.shape[2] * 2:
                raise ShapeError(f"level {index} {tuple(fine.shape)} is not 2x level {next_index} {tuple(coarse.shape)}")
        for index, feature in self.levels:
            if feature.ndim != 3 or feature.shape[0] != channels:
                raise ShapeError(f"level {index} has shape {tuple(feature.shape)}, expected {channels} channels")

    @staticmethod
    def stride(level: int) -> int:
        return 2 ** (level - 1)

    def level(self, index: int) -> Tensor:
        for level_index, feature in self.levels:
            if level_index == index:
                return feature
        raise KeyError(f"pyramid has no level {index}")


@dataclass(frozen=True)
class AnchorOutput:
    """RPN output at one anchor."""
    level: int
    anchor: Box
    score: float
    deltas: Tuple[float, float, float, float]

    def decode(self) -> Box:
        return apply_deltas(self.anchor, self.deltas)


@dataclass(frozen=True)
class Detection:
    """
    One segmented region.

    mask is a boolean [S x S] grid aligned to box; mask_prob keeps the head's
    probability map for inspection and is left out of comparisons.
    """
    score: float
    box: Box
    mask: np.ndarray = field(compare=False)
    deltas: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    mask_prob: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def paste_mask(self, height: int, width: int) -> np.ndarray:
        return paste_mask(self.mask, self.box, width, height)

    def to_record(self) -> dict:
        return {
            'score': float(self.score),
            'box': [float(v) for v in self.box],
            'mask_rle': rle_encode(self.mask),
        }


def apply_deltas(box: Sequence[float], deltas: Sequence[float]) -> Box:
    """
    Standard box parameterisation: dx, dy shift the centre in units of box
    size; dw, dh scale width and height by exp().
    """
    if not any(deltas):
        return tuple(float(v) for v in box)
    x1, y1, x2, y2 = (float(v) for v in box)
    dx, dy, dw, dh = (float(v) for v in deltas)
    width, height = x2 - x1, y2 - y1
    cx = x1 + 0.5 * width + dx * width
    cy = y1 + 0.5 * height + dy * height
    width = width * math.exp(min(dw, DELTA_CLIP))
    height = height * math.exp(min(dh, DELTA_CLIP))
    return (cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height)


def anchor_box(level: int, row: int, col: int) -> Box:
    stride = PyramidLevels.stride(level)
    half = 2.0 * stride
    cx = (col + 0.5) * stride
    cy = (row + 0.5) * stride
    return (cx - half, cy - half, cx + half, cy + half)


def _as_image(image: Tensor) -> Tensor:
    image = as_tensor(image)
    if image.ndim == 2:
        image = image[None, :, :]
    if image.ndim != 3:
        raise ShapeError(f"image must be [H x W] or [C x H x W], got {tuple(image.shape)}")
    return image


def toy_backbone(image: Tensor, weights: DetectorWeights) -> PyramidLevels:
    """
    Three residual stages, each conv(conv(x)) + x followed by a stride-2
    max-pool. A single-channel input is broadcast across channels for the
    identity shortcut of the first stage.
    """
    x = _as_image(image)
    _, height, width = x.shape
    if height % 8 or width % 8:
        raise ShapeError(f"image size {height}x{width} is not divisible by 8")
    if x.shape[0] != weights.input_channels:
        raise ShapeError(f"image has {x.shape[0]} channels, backbone expects {weights.input_channels}")

    levels = []
    for index, stage in enumerate(weights.backbone):
        residual = conv2d(conv2d(x, stage.conv1_weight, stage.conv1_bias), stage.conv2_weight, stage.conv2_bias)
        shortcut = x
        if shortcut.shape[0] != residual.shape[0]:
            if shortcut.shape[0] != 1:
                raise ShapeError(f"cannot map {shortcut.shape[0]} channels onto {residual.shape[0]} in the shortcut")
            shortcut = np.broadcast_to(shortcut, residual.shape)
        x = max_pool_2x(add(residual, shortcut))
        levels.append((FIRST_LEVEL + index, x))
    return PyramidLevels(tuple(levels))


def fpn_merge(c: PyramidLevels, weights: DetectorWeights) -> PyramidLevels:
    """P_l = W_l * C_l + upsample(P_{l+1}); the top level has no upsample term."""
    if len(c.levels) != len(weights.laterals):
        raise ShapeError(f"{len(c.levels)} pyramid levels but {len(weights.laterals)} lateral kernels")

    merged: List[Tuple[int, Tensor]] = []
    above: Optional[Tensor] = None
    for position in reversed(range(len(c.levels))):
        index, feature = c.levels[position]
        p = conv2d(feature, weights.laterals[position])
        if above is not None:
            p = add(p, upsample_nearest_2x(above))
        merged.append((index, p))
        above = p
    return PyramidLevels(tuple(reversed(merged)))


def rpn_forward(p: PyramidLevels, weights: DetectorWeights) -> List[AnchorOutput]:
    """
    score = sigmoid(W_s * P + b_s), deltas = W_r * P + b_r at every cell of
    every level. Output order: ascending level, then row-major cells.
    """
    outputs: List[AnchorOutput] = []
    for level, feature in p.levels:
        scores = sigmoid_map(conv2d(feature, weights.w_s, weights.b_s))[0]
        deltas = conv2d(feature, weights.w_r, weights.b_r)
        rows, cols = scores.shape
        for row in range(rows):
            for col in range(cols):
                outputs.append(AnchorOutput(
                    level=level,
                    anchor=anchor_box(level, row, col),
                    score=float(scores[row, col]),
                    deltas=tuple(float(v) for v in deltas[:, row, col]),
                ))
    return outputs


def select_proposals(outputs: Sequence[AnchorOutput], threshold: float) -> List[AnchorOutput]:
    return [o for o in outputs if o.score >= threshold]


def roi_align(level: Tensor, box: Sequence[float], out: int) -> Tensor:
    """
    Fixed-size [C x out x out] crop of a feature map, without quantisation.

    box is in continuous feature coordinates (cell i spans [i, i+1)) and is
    clamped to the map first. Each output bin is sampled once at its centre;
    the centre maps to grid coordinate (centre - 0.5), clamped to the grid.
    """
    if out < 1:
        raise ShapeError(f"RoI output size must be at least 1, got {out}")
    channels, height, width = level.shape
    x1, y1, x2, y2 = clamp_box(box, width, height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateBoxError(f"degenerate RoI {tuple(box)} on a {height}x{width} map")

    bin_w = (x2 - x1) / out
    bin_h = (y2 - y1) / out
    steps = np.arange(out, dtype=np.float64) + 0.5
    grid_x = np.clip(x1 + steps * bin_w - 0.5, 0.0, width - 1)
    grid_y = np.clip(y1 + steps * bin_h - 0.5, 0.0, height - 1)
    xs = np.tile(grid_x, out)
    ys = np.repeat(grid_y, out)
    samples = bilinear_sample_channels(level, xs, ys)
    return samples.reshape(channels, out, out).astype(np.float32)


def detect_heads(roi_features: Tensor, weights: DetectorWeights,
                 proposal: Optional[Sequence[float]] = None,
                 image_size: Optional[Tuple[int, int]] = None) -> Detection:
    """
    Objectness, box refinement and mask heads on one RoI.

    Args:
        roi_features: [C x S x S] from roi_align
        weights: detector weights
        proposal: box the deltas refine (image pixels); the unit box when omitted
        image_size: (height, width) to clamp the refined box to

    Returns:
        Detection with score in (0, 1) and an [S x S] mask
    """
    pooled_score = conv2d(roi_features, weights.w_o, weights.b_o).astype(np.float64).mean(axis=(1, 2))
    score = float(sigmoid_map(pooled_score.astype(np.float32))[0])
    deltas = tuple(float(v) for v in conv2d(roi_features, weights.w_b, weights.b_b).astype(np.float64).mean(axis=(1, 2)))
    mask_prob = sigmoid_map(conv2d(roi_features, weights.w_m, weights.b_m))[0]
    mask = mask_prob > 0.5

    box = apply_deltas(proposal if proposal is not None else (0.0, 0.0, 1.0, 1.0), deltas)
    if image_size is not None:
        box = clamp_box(box, image_size[1], image_size[0])
    return Detection(score=score, box=box, mask=mask, deltas=deltas, mask_prob=mask_prob)


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    Greedy suppression in descending score; equal scores keep the lower
    (y1, x1) first. Output is sorted by descending score.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigurationError(f"NMS IoU threshold {iou_threshold} outside (0, 1)")
    ordered = sorted(detections, key=lambda d: (-d.score, d.box[1], d.box[0]))
    kept: List[Detection] = []
    for candidate in ordered:
        if all(box_iou(candidate.box, k.box) < iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def segment_image(image: Tensor, weights: DetectorWeights, config: DetectorConfig) -> List[Detection]:
    """
    Full detector pass. Detections are ordered top-to-bottom, then
    left-to-right by box origin.
    """
    config.validate()
    x = _as_image(image)
    _, height, width = x.shape

    pyramid = fpn_merge(toy_backbone(x, weights), weights)
    proposals = select_proposals(rpn_forward(pyramid, weights), config.proposal_threshold)
    logger.debug(f"{len(proposals)} proposals above {config.proposal_threshold}")

    candidates: List[Detection] = []
    for proposal in proposals:
        box = clamp_box(proposal.decode(), width, height)
        stride = PyramidLevels.stride(proposal.level)
        feature_box = tuple(v / stride for v in box)
        try:
            features = roi_align(pyramid.level(proposal.level), feature_box, config.roi_size)
        except DegenerateBoxError as e:
            logger.debug(f"Skipping proposal: {e}")
            continue
        detection = detect_heads(features, weights, proposal=box, image_size=(height, width))
        if detection.box[2] <= detection.box[0] or detection.box[3] <= detection.box[1]:
            logger.debug(f"Skipping degenerate refined box {detection.box}")
            continue
        candidates.append(detection)

    kept = nms(candidates, config.nms_iou)
    kept.sort(key=lambda d: (d.box[1], d.box[0], -d.score))
    return kept
