"""
RxExtract v1.0.0 - Geometry
Boxes, masks and run-length encoding shared by detector, metrics and fixtures

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates, pixel (px, py)
covering [px, px+1) x [py, py+1). Mask RLE follows COCO: column-major runs
starting with zeros, {"size": [h, w], "counts": "<compressed>"}; uncompressed
list counts are accepted on input. Encoding, decoding, area and IoU go
through pycocotools.
"""

from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pycocotools import mask as mask_utils

from app.errors import FormatError, ShapeError

Box = Tuple[float, float, float, float]


def box_area(box: Sequence[float]) -> float:
    x1, y1, x2, y2 = box
    return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    union = box_area(a) + box_area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def clamp_box(box: Sequence[float], width: float, height: float) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    return (
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
        min(max(x2, 0.0), width),
        min(max(y2, 0.0), height),
    )


def pixel_footprint(box: Sequence[float], width: int, height: int) -> Tuple[int, int, int, int]:
    """Integer pixel range [x1, x2) x [y1, y2) whose pixel centres lie inside the box."""
    x1, y1, x2, y2 = box
    px1 = max(int(np.ceil(x1 - 0.5)), 0)
    py1 = max(int(np.ceil(y1 - 0.5)), 0)
    px2 = min(int(np.ceil(x2 - 0.5)), width)
    py2 = min(int(np.ceil(y2 - 0.5)), height)
    return px1, py1, max(px2, px1), max(py2, py1)


def paste_mask(mask: np.ndarray, box: Sequence[float], width: int, height: int) -> np.ndarray:
    """
    Project an [S x S] box-aligned mask into an image-sized boolean mask
    (nearest cell per pixel centre). Pixels outside the box stay False.
    """
    full = np.zeros((height, width), dtype=bool)
    px1, py1, px2, py2 = pixel_footprint(box, width, height)
    if px2 <= px1 or py2 <= py1:
        return full
    x1, y1, x2, y2 = box
    rows, cols = mask.shape
    ys = (np.arange(py1, py2) + 0.5 - y1) / (y2 - y1) * rows
    xs = (np.arange(px1, px2) + 0.5 - x1) / (x2 - x1) * cols
    yi = np.clip(np.floor(ys).astype(np.int64), 0, rows - 1)
    xi = np.clip(np.floor(xs).astype(np.int64), 0, cols - 1)
    full[py1:py2, px1:px2] = mask[np.ix_(yi, xi)]
    return full


def _fortran(mask: np.ndarray) -> np.ndarray:
    return np.asfortranarray(np.asarray(mask, dtype=bool).astype(np.uint8))


def _encoded(mask: np.ndarray) -> Dict[str, Any]:
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    return mask_utils.encode(_fortran(mask))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() and not b.any():
        return 0.0
    return float(mask_utils.iou([_encoded(a)], [_encoded(b)], [0])[0][0])


def mask_area(mask: np.ndarray) -> int:
    return int(mask_utils.area(_encoded(mask)))


def rle_encode(mask: np.ndarray) -> Dict[str, Any]:
    """COCO compressed RLE with JSON-ready fields."""
    rle = _encoded(np.asarray(mask))
    return {'size': [int(v) for v in rle['size']], 'counts': rle['counts'].decode('ascii')}


def _string_counts(encoded: str) -> List[int]:
    """Run lengths of a COCO compressed counts string (6-bit groups, delta-coded from the third run)."""
    counts: List[int] = []
    position = 0
    while position < len(encoded):
        value = 0
        shift = 0
        more = True
        while more:
            if position >= len(encoded):
                raise FormatError("RLE counts string ends inside a run", offset=position)
            code = ord(encoded[position]) - 48
            if not 0 <= code < 64:
                raise FormatError(f"RLE counts string has invalid character {encoded[position]!r}",
                                  offset=position)
            value |= (code & 0x1f) << (5 * shift)
            more = bool(code & 0x20)
            position += 1
            shift += 1
            if not more and code & 0x10:
                value -= 1 << (5 * shift)
        if len(counts) > 2:
            value += counts[-2]
        counts.append(value)
    return counts


def rle_counts(rle: Dict[str, Any]) -> Tuple[int, int, List[int]]:
    """
    Validate an RLE object and return (height, width, run lengths).

    Accepts uncompressed list counts and COCO compressed string counts.
    Every run must be non-negative and the runs must cover exactly h * w pixels.
    """
    if not isinstance(rle, dict) or 'size' not in rle or 'counts' not in rle:
        raise FormatError("RLE must be an object with 'size' and 'counts'")
    size = rle['size']
    if (not isinstance(size, (list, tuple)) or len(size) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in size)):
        raise FormatError(f"RLE size must be two positive integers, got {size!r}")
    height, width = size
    raw = rle['counts']
    if isinstance(raw, bytes):
        raw = raw.decode('ascii', errors='replace')
    if isinstance(raw, str):
        counts = _string_counts(raw)
    elif isinstance(raw, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
        counts = list(raw)
    else:
        raise FormatError("RLE counts must be a list of integers or a compressed string")
    if any(run < 0 for run in counts):
        raise FormatError("RLE counts contain a negative run")
    if sum(counts) != height * width:
        raise FormatError(f"RLE counts sum to {sum(counts)}, expected {height * width}")
    return height, width, counts


def rle_decode(rle: Dict[str, Any]) -> np.ndarray:
    height, width, _ = rle_counts(rle)
    counts = rle['counts']
    if isinstance(counts, (list, tuple)):
        coco = mask_utils.frPyObjects({'size': [height, width], 'counts': list(counts)}, height, width)
    else:
        coco = {'size': [height, width], 'counts': counts.encode('ascii') if isinstance(counts, str) else counts}
    return mask_utils.decode(coco).astype(bool)
