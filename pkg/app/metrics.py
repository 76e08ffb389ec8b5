"""
RxExtract v1.0.0 - Metrics
Character error rate and COCO-style average precision

CER:
- cer(ref, hyp) = levenshtein(ref, hyp) / |ref|
- corpus CER is micro-averaged: total edits / total reference characters
- improvement = before - after, always recomputed

AP:
- detections ranked by score (descending), then image, then detection index
- each detection claims the highest-IoU unmatched ground truth at or above
  the threshold (lowest index on ties)
- all-point interpolated area under the precision/recall curve, x100
- AP averages thresholds 0.50:0.05:0.95; APm covers ground-truth areas in
  [32^2, 96^2], APl areas above 96^2; small objects are not reported
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import AlignmentError, ConfigurationError, RangeError, UndefinedReferenceError
from app.geometry import box_area, box_iou, mask_area, mask_iou
from app.matcher import levenshtein

logger = logging.getLogger('rxextract.metrics')

CER_DECIMALS = 4
AP_DECIMALS = 3

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AREA_MEDIUM = (32.0 ** 2, 96.0 ** 2)
AREA_LARGE = (96.0 ** 2, float('inf'))

TASK_BBOX = 'bbox'
TASK_SEGM = 'segm'

# pooled row across every category; no fixture category may use this label
OVERALL_CATEGORY = 'all'


# ==================== CER ====================

def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise UndefinedReferenceError("CER is undefined for an empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


def corpus_counts(pairs: Sequence[Tuple[str, str]]) -> Tuple[int, int]:
    """(total edits, total reference characters) over (reference, hypothesis) pairs."""
    edits = 0
    chars = 0
    for index, (reference, hypothesis) in enumerate(pairs):
        if not reference:
            raise UndefinedReferenceError(f"empty reference at pair index {index}")
        edits += levenshtein(reference, hypothesis)
        chars += len(reference)
    return edits, chars


def corpus_cer(pairs: Sequence[Tuple[str, str]]) -> float:
    """Micro-averaged CER."""
    edits, chars = corpus_counts(pairs)
    if chars == 0:
        raise UndefinedReferenceError("corpus CER needs at least one pair")
    return edits / chars


@dataclass(frozen=True)
class CerReport:
    """
    One row of the before/after string-matching comparison.

    improvement is derived from cer_before and cer_after and is never stored.
    """
    category: str
    cer_before: float
    cer_after: float
    pairs: int = 0
    reference_chars: int = 0
    edits_before: int = 0
    edits_after: int = 0

    @property
    def improvement(self) -> float:
        return self.cer_before - self.cer_after

    def improvement_discrepancy(self, claimed: float, tolerance: float = 0.5 * 10 ** -CER_DECIMALS) -> bool:
        """True when a claimed improvement disagrees with before - after."""
        return abs(claimed - round(self.improvement, CER_DECIMALS)) > tolerance

    def to_record(self) -> dict:
        return {
            'category': self.category,
            'cer_before': round(self.cer_before, CER_DECIMALS),
            'cer_after': round(self.cer_after, CER_DECIMALS),
            'improvement': round(self.improvement, CER_DECIMALS),
            'pairs': self.pairs,
            'reference_chars': self.reference_chars,
            'edits_before': self.edits_before,
            'edits_after': self.edits_after,
        }

    @classmethod
    def from_record(cls, record: dict) -> 'CerReport':
        # improvement in the record is ignored; it is recomputed
        return cls(
            category=record['category'],
            cer_before=float(record['cer_before']),
            cer_after=float(record['cer_after']),
            pairs=int(record.get('pairs', 0)),
            reference_chars=int(record.get('reference_chars', 0)),
            edits_before=int(record.get('edits_before', 0)),
            edits_after=int(record.get('edits_after', 0)),
        )


def compare_before_after(pairs_before: Sequence[Tuple[str, str]],
                         pairs_after: Sequence[Tuple[str, str]],
                         category: str) -> CerReport:
    """
    Build a CerReport from two pair lists sharing the same references.

    Raises:
        AlignmentError: pair counts differ or a reference differs
        UndefinedReferenceError: an empty reference (index named)
    """
    if len(pairs_before) != len(pairs_after):
        raise AlignmentError(f"{len(pairs_before)} pairs before matching vs {len(pairs_after)} after")
    for index, (before, after) in enumerate(zip(pairs_before, pairs_after)):
        if before[0] != after[0]:
            raise AlignmentError(f"reference mismatch at pair index {index}: {before[0]!r} vs {after[0]!r}")

    edits_before, chars = corpus_counts(pairs_before)
    edits_after, _ = corpus_counts(pairs_after)
    if chars == 0:
        return CerReport(category=category, cer_before=0.0, cer_after=0.0)
    return CerReport(
        category=category,
        cer_before=edits_before / chars,
        cer_after=edits_after / chars,
        pairs=len(pairs_before),
        reference_chars=chars,
        edits_before=edits_before,
        edits_after=edits_after,
    )


# ==================== AVERAGE PRECISION ====================

@dataclass(frozen=True)
class ScoredRegion:
    """A detection to evaluate; mask is image-sized and only needed for segm."""
    score: float
    box: Tuple[float, float, float, float]
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TruthRegion:
    box: Tuple[float, float, float, float]
    mask: Optional[np.ndarray] = None


def _overlap(task: str, a, b) -> float:
    if task == TASK_SEGM:
        return mask_iou(a.mask, b.mask)
    return box_iou(a.box, b.box)


def _area(task: str, region) -> float:
    if task == TASK_SEGM:
        return float(mask_area(region.mask))
    return box_area(region.box)


def _in_range(area: float, area_range: Tuple[float, float]) -> bool:
    low, high = area_range
    if high == float('inf'):
        return area > low
    return low <= area <= high


def precision_recall_area(flags: Sequence[bool], positives: int) -> float:
    """
    All-point interpolated AP (x100) for ranked true/false-positive flags.

    Precision is made monotone from the right before integrating over recall.
    """
    if positives == 0:
        return 100.0 if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool)).astype(np.float64)
    recall = tp / positives
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]) * 100.0)


def average_precision(detections: Sequence[Sequence[ScoredRegion]],
                      ground_truth: Sequence[Sequence[TruthRegion]],
                      iou_threshold: float,
                      task: str = TASK_BBOX,
                      area_range: Optional[Tuple[float, float]] = None) -> Optional[float]:
    """
    Average precision over a set of images.

    Args:
        detections: per image, the scored detections
        ground_truth: per image, the annotated regions
        iou_threshold: in (0, 1)
        task: 'bbox' (box IoU, box area) or 'segm' (mask IoU, mask area)
        area_range: keep only ground truths in this area range; the others
            are ignored together with the detections they claim

    Returns:
        AP in [0, 100]. With no ground truth: 100 without detections, 0 with
        any. None when area_range is given and no ground truth falls inside.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigurationError(f"IoU threshold {iou_threshold} outside (0, 1)")
    if task not in (TASK_BBOX, TASK_SEGM):
        raise ConfigurationError(f"unknown AP task {task!r}")
    if len(detections) != len(ground_truth):
        raise AlignmentError(f"{len(detections)} detection lists vs {len(ground_truth)} ground-truth lists")

    ignored = [
        [area_range is not None and not _in_range(_area(task, gt), area_range) for gt in truths]
        for truths in ground_truth
    ]
    positives = sum(flag is False for flags in ignored for flag in flags)
    if area_range is not None and positives == 0:
        return None

    ranked = sorted(
        ((det.score, image, index) for image, dets in enumerate(detections) for index, det in enumerate(dets)),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    claimed = [[False] * len(truths) for truths in ground_truth]
    flags: List[bool] = []

    for _, image, index in ranked:
        det = detections[image][index]
        truths = ground_truth[image]
        # non-ignored ground truths are preferred over ignored ones
        best: Optional[Tuple[bool, float, int]] = None
        for gt_index, gt in enumerate(truths):
            if claimed[image][gt_index]:
                continue
            iou = _overlap(task, det, gt)
            if iou < iou_threshold:
                continue
            key = (ignored[image][gt_index], -iou, gt_index)
            if best is None or key < best:
                best = key
        if best is not None:
            claimed[image][best[2]] = True
            if not best[0]:
                flags.append(True)
            continue
        if area_range is not None and not _in_range(_area(task, det), area_range):
            continue
        flags.append(False)

    return precision_recall_area(flags, positives)


@dataclass(frozen=True)
class ApReport:
    """Table-style AP family; ap_m and ap_l are None for an empty area subset."""
    task: str
    ap: float
    ap50: float
    ap75: float
    ap_m: Optional[float] = None
    ap_l: Optional[float] = None

    FIELDS = ('ap', 'ap50', 'ap75', 'ap_m', 'ap_l')

    def __post_init__(self):
        for name in self.FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise RangeError(f"{self.task} {name} = {value} outside [0, 100]")

    def to_record(self) -> dict:
        record = {'task': self.task}
        for name in self.FIELDS:
            value = getattr(self, name)
            record[name] = None if value is None else round(value, AP_DECIMALS)
        return record

    @classmethod
    def from_record(cls, record: dict) -> 'ApReport':
        return cls(task=record['task'], **{
            name: None if record.get(name) is None else float(record[name]) for name in cls.FIELDS
        })


def _mean_over_thresholds(detections, ground_truth, task, area_range=None) -> Optional[float]:
    values = [average_precision(detections, ground_truth, t, task, area_range) for t in IOU_THRESHOLDS]
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def ap_suite(detections: Sequence[Sequence[ScoredRegion]],
             ground_truth: Sequence[Sequence[TruthRegion]],
             task: str = TASK_BBOX) -> ApReport:
    """AP, AP50, AP75, APm and APl for one task."""
    report = ApReport(
        task=task,
        ap=_mean_over_thresholds(detections, ground_truth, task),
        ap50=average_precision(detections, ground_truth, 0.5, task),
        ap75=average_precision(detections, ground_truth, 0.75, task),
        ap_m=_mean_over_thresholds(detections, ground_truth, task, AREA_MEDIUM),
        ap_l=_mean_over_thresholds(detections, ground_truth, task, AREA_LARGE),
    )
    logger.debug(f"{task}: AP {report.ap:.3f} AP50 {report.ap50:.3f} AP75 {report.ap75:.3f}")
    return report


# ==================== TABLE RENDERING ====================

def _fixed(value: Optional[float], decimals: int) -> str:
    return '-' if value is None else f"{value:.{decimals}f}"


def render_cer_table(reports: Sequence[CerReport]) -> str:
    """Categories as rows; before, after and improvement columns at 4 decimals."""
    header = ('Data Category', 'CER Before SM', 'CER After SM', 'Improvement')
    rows = [
        (r.category, _fixed(r.cer_before, CER_DECIMALS), _fixed(r.cer_after, CER_DECIMALS),
         _fixed(round(r.improvement, CER_DECIMALS) + 0.0, CER_DECIMALS))
        for r in reports
    ]
    return _render(header, rows)


def render_ap_table(bbox: ApReport, segm: ApReport) -> str:
    """Metrics as rows; Bbox and Segm columns at 3 decimals, '-' for null."""
    header = ('Metric', 'Bbox', 'Segm')
    labels = {'ap': 'AP', 'ap50': 'AP50', 'ap75': 'AP75', 'ap_m': 'APm', 'ap_l': 'APl'}
    rows = [
        (labels[name], _fixed(getattr(bbox, name), AP_DECIMALS), _fixed(getattr(segm, name), AP_DECIMALS))
        for name in ApReport.FIELDS
    ]
    return _render(header, rows)


def _render(header: Tuple[str, ...], rows: List[Tuple[str, ...]]) -> str:
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = [' | '.join(str(cell).ljust(widths[i]) if i == 0 else str(cell).rjust(widths[i])
                        for i, cell in enumerate(row))
             for row in [header] + rows]
    lines.insert(1, '-+-'.join('-' * w for w in widths))
    return '\n'.join(lines)


def cer_reports_by_category(pairs: Dict[str, Tuple[List[Tuple[str, str]], List[Tuple[str, str]]]],
                            overall: Optional[str] = OVERALL_CATEGORY) -> List[CerReport]:
    """
    One CerReport per category in sorted order, followed by an overall row
    across every category when `overall` is set.
    """
    reports = [compare_before_after(before, after, category)
               for category, (before, after) in sorted(pairs.items())]
    if overall is not None:
        before_all = [p for category in sorted(pairs) for p in pairs[category][0]]
        after_all = [p for category in sorted(pairs) for p in pairs[category][1]]
        reports.append(compare_before_after(before_all, after_all, overall))
    return reports
