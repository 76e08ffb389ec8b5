"""
RxExtract v1.0.0 - Pipeline
End-to-end run: segment -> recognize -> normalize -> decide -> evaluate

Run Rules:
- Images are processed by a worker pool; results merge in input order
- A failing image is recorded as {image, error} and the batch continues
- Weights, lexicon and config are shared read-only during a run
- Report bytes depend only on (seed, config, inputs), never on parallelism
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.detector import Detection, DetectorConfig, segment_image
from app.errors import ConfigurationError, RxExtractError
from app.fixtures import FixtureAnnotation, FixtureSet, check_annotation, load_fixtures
from app.geometry import box_iou, pixel_footprint
from app.matcher import Lexicon, MatchDecision, MatcherConfig, decide, load_lexicon
from app.metrics import (
    OVERALL_CATEGORY, TASK_BBOX, TASK_SEGM, ApReport, CerReport, ScoredRegion, TruthRegion,
    ap_suite, cer_reports_by_category, render_ap_table, render_cer_table,
)
from app.recognizer import RecognizerConfig, Vocab, recognize
from app.weights import WeightBundle, init_weights, load_weights

logger = logging.getLogger('rxextract.pipeline')

# Detections claim ground-truth regions at or above this box IoU for CER pairing
PAIRING_IOU = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    weights_path: Optional[str] = None
    lexicon_path: Optional[str] = None
    input_dir: Optional[str] = None
    report_path: Optional[str] = None

    t_l: float = 70.0
    t_f: float = 80.0
    proposal_threshold: float = 0.7
    nms_iou: float = 0.5
    roi_size: int = 8
    channels: int = 8

    patch_size: int = 4
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    max_len: int = 32
    max_patches: int = 256
    ffn_dim: int = 64

    seed: Optional[int] = None
    init_scale: float = 0.02
    parallelism: int = 1
    bypass: bool = False

    # Left out of the report echo
    UNECHOED = ('report_path', 'parallelism')

    @classmethod
    def from_config(cls, config, **overrides) -> 'PipelineConfig':
        """Defaults from a Config class; overrides set to None are ignored."""
        values = {
            'report_path': config.REPORT_PATH,
            't_l': config.T_L, 't_f': config.T_F,
            'proposal_threshold': config.PROPOSAL_THRESHOLD, 'nms_iou': config.NMS_IOU,
            'roi_size': config.ROI_SIZE, 'channels': config.CHANNELS,
            'patch_size': config.PATCH_SIZE, 'd_model': config.D_MODEL, 'heads': config.HEADS,
            'layers': config.LAYERS, 'max_len': config.MAX_LEN, 'max_patches': config.MAX_PATCHES,
            'ffn_dim': config.FFN_DIM, 'init_scale': config.INIT_SCALE, 'parallelism': config.PARALLELISM,
        }
        known = {f.name for f in fields(cls)}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigurationError(f"unknown pipeline setting {key!r}")
            if value is not None:
                values[key] = value
        return cls(**values)

    def matcher_config(self) -> MatcherConfig:
        return MatcherConfig(t_l=self.t_l, t_f=self.t_f)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(proposal_threshold=self.proposal_threshold, nms_iou=self.nms_iou,
                              roi_size=self.roi_size)

    def recognizer_config(self) -> RecognizerConfig:
        return RecognizerConfig(patch_size=self.patch_size, d_model=self.d_model, heads=self.heads,
                                layers=self.layers, max_len=self.max_len, max_patches=self.max_patches,
                                ffn_dim=self.ffn_dim)

    def validate(self):
        self.matcher_config().validate()
        self.detector_config().validate()
        self.recognizer_config().validate()
        if self.parallelism < 1:
            raise ConfigurationError(f"parallelism must be at least 1, got {self.parallelism}")
        if self.channels < 1:
            raise ConfigurationError(f"detector channels must be at least 1, got {self.channels}")
        if self.init_scale <= 0:
            raise ConfigurationError(f"init scale must be positive, got {self.init_scale}")
        if not self.bypass and self.weights_path is None and self.seed is None:
            raise ConfigurationError("a seed is required when weights are randomly initialised")

    def echo(self) -> dict:
        return {key: value for key, value in asdict(self).items() if key not in self.UNECHOED}


@dataclass
class EvalReport:
    """
    Result of one pipeline run: CER rows per category (plus 'all'), AP for
    boxes and masks, per-image records and the per-image error list.
    """
    config: dict
    seed: Optional[int]
    cer: List[CerReport] = field(default_factory=list)
    bbox: Optional[ApReport] = None
    segm: Optional[ApReport] = None
    images: List[dict] = field(default_factory=list)
    errors: List[dict] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    @property
    def exit_code(self) -> int:
        return 2 if self.errors else 0

    def category(self, name: str) -> Optional[CerReport]:
        for report in self.cer:
            if report.category == name:
                return report
        return None

    def to_record(self) -> dict:
        tables = {'cer': render_cer_table(self.cer).splitlines()}
        if self.bbox is not None and self.segm is not None:
            tables['ap'] = render_ap_table(self.bbox, self.segm).splitlines()
        return {
            'config': self.config,
            'seed': self.seed,
            'cer': [report.to_record() for report in self.cer],
            'ap': {
                TASK_BBOX: self.bbox.to_record() if self.bbox else None,
                TASK_SEGM: self.segm.to_record() if self.segm else None,
            },
            'tables': tables,
            'images': self.images,
            'errors': self.errors,
        }


@dataclass(frozen=True)
class RunContext:
    """Read-only state shared by every worker."""
    config: PipelineConfig
    lexicon: Lexicon
    vocab: Vocab
    weights: Optional[WeightBundle]


@dataclass
class ImageResult:
    index: int
    record: dict
    category: str = 'valid'
    pairs_before: List[Tuple[str, str]] = field(default_factory=list)
    pairs_after: List[Tuple[str, str]] = field(default_factory=list)
    scored: List[ScoredRegion] = field(default_factory=list)
    truths: List[TruthRegion] = field(default_factory=list)
    error: Optional[str] = None


def crop_region(image: np.ndarray, box) -> np.ndarray:
    """Pixels whose centres fall inside the box, as float32 [h x w]."""
    height, width = image.shape
    x1, y1, x2, y2 = pixel_footprint(box, width, height)
    return np.ascontiguousarray(image[y1:y2, x1:x2], dtype=np.float32)


def pair_detections(detections: List[Detection], truth_boxes: List[List[float]]) -> List[Optional[int]]:
    """
    For each ground-truth box in order, the index of the unclaimed detection
    with the highest box IoU at or above PAIRING_IOU (lowest index on ties).
    """
    claimed = set()
    pairing: List[Optional[int]] = []
    for truth in truth_boxes:
        best: Optional[Tuple[float, int]] = None
        for index, detection in enumerate(detections):
            if index in claimed:
                continue
            iou = box_iou(detection.box, truth)
            if iou >= PAIRING_IOU and (best is None or (-iou, index) < best):
                best = (-iou, index)
        if best is not None:
            claimed.add(best[1])
        pairing.append(None if best is None else best[1])
    return pairing


def _decision_record(raw: str, decision: MatchDecision) -> dict:
    return {'raw': raw, **decision.to_record()}


def process_image(index: int, image: np.ndarray, annotation: FixtureAnnotation, context: RunContext) -> ImageResult:
    """Run one image through the pipeline; RxExtractError propagates to the caller."""
    config = context.config
    matcher_config = config.matcher_config()
    pixels = image.astype(np.float32) / np.float32(255)
    height, width = pixels.shape
    check_annotation(annotation, height, width)
    truth_masks = annotation.mask_arrays()
    truths = [TruthRegion(box=tuple(box), mask=mask) for box, mask in zip(annotation.boxes, truth_masks)]
    result = ImageResult(index=index, record={'image': annotation.image, 'category': annotation.category},
                         category=annotation.category, truths=truths)

    if config.bypass:
        # Ground-truth regions and the corrupted transcripts stand in for detector + recognizer
        regions = []
        for truth, reference, raw in zip(truths, annotation.transcripts, annotation.noisy_transcripts):
            decision = decide(raw, context.lexicon, matcher_config)
            result.pairs_before.append((reference, raw))
            result.pairs_after.append((reference, decision.hypothesis))
            result.scored.append(ScoredRegion(score=1.0, box=truth.box, mask=truth.mask))
            regions.append({'box': list(truth.box), 'score': 1.0, 'decision': _decision_record(raw, decision)})
        result.record['regions'] = regions
        return result

    weights = context.weights
    detections = segment_image(pixels, weights.require_detector(), config.detector_config())
    recognizer_weights = weights.require_recognizer()
    recognizer_config = config.recognizer_config()

    regions = []
    texts: List[str] = []
    decisions: List[MatchDecision] = []
    for detection in detections:
        tokens = recognize(crop_region(pixels, detection.box), recognizer_weights, context.vocab, recognizer_config)
        decision = decide(tokens.text, context.lexicon, matcher_config)
        texts.append(tokens.text)
        decisions.append(decision)
        result.scored.append(ScoredRegion(score=detection.score, box=detection.box,
                                          mask=detection.paste_mask(height, width)))
        regions.append({
            'box': [round(v, 6) for v in detection.box],
            'score': round(detection.score, 6),
            'decision': _decision_record(tokens.text, decision),
        })

    for reference, paired in zip(annotation.transcripts, pair_detections(detections, annotation.boxes)):
        if paired is None:
            result.pairs_before.append((reference, ''))
            result.pairs_after.append((reference, ''))
        else:
            result.pairs_before.append((reference, texts[paired]))
            result.pairs_after.append((reference, decisions[paired].hypothesis))
    result.record['regions'] = regions
    return result


def _guarded(index: int, fixtures: FixtureSet, context: RunContext) -> ImageResult:
    annotation = fixtures.annotations[index]
    try:
        return process_image(index, fixtures.images[index], annotation, context)
    except RxExtractError as e:
        logger.error(f"Image {annotation.image} failed: {e}")
        return ImageResult(index=index, record={'image': annotation.image}, error=str(e))


def _resolve_weights(config: PipelineConfig) -> Optional[WeightBundle]:
    if config.bypass:
        return None
    if config.weights_path is not None:
        return load_weights(config.weights_path)
    vocab_size = Vocab().size
    return init_weights(config.seed, config.channels, config.recognizer_config(), vocab_size, config.init_scale)


def run_pipeline(config: PipelineConfig, fixtures: Optional[FixtureSet] = None,
                 lexicon: Optional[Lexicon] = None, weights: Optional[WeightBundle] = None) -> EvalReport:
    """
    Evaluate a fixture set end to end.

    Args:
        config: validated before use
        fixtures: loaded from config.input_dir when omitted
        lexicon: loaded from config.lexicon_path when omitted
        weights: loaded from config.weights_path (or seeded) when omitted

    Returns:
        EvalReport with the per-image error list filled for failed images
    """
    config.validate()
    if fixtures is None:
        if config.input_dir is None:
            raise ConfigurationError("no input directory configured")
        fixtures = load_fixtures(config.input_dir)
    if lexicon is None:
        if config.lexicon_path is None:
            raise ConfigurationError("no lexicon configured")
        lexicon = load_lexicon(config.lexicon_path)
    if weights is None:
        weights = _resolve_weights(config)

    context = RunContext(config=config, lexicon=lexicon, vocab=Vocab(), weights=weights)
    logger.info(f"Running pipeline on {len(fixtures)} images (parallelism {config.parallelism}, bypass {config.bypass})")

    indices = range(len(fixtures))
    if config.parallelism == 1:
        results = [_guarded(i, fixtures, context) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
            results = list(executor.map(lambda i: _guarded(i, fixtures, context), indices))

    report = EvalReport(config=config.echo(), seed=config.seed if config.seed is not None else fixtures.seed)
    pairs: Dict[str, Tuple[List[Tuple[str, str]], List[Tuple[str, str]]]] = {}
    scored: List[List[ScoredRegion]] = []
    truths: List[List[TruthRegion]] = []

    for result in results:
        if result.error is not None:
            report.errors.append({'image': result.record['image'], 'error': result.error})
            continue
        report.images.append(result.record)
        before, after = pairs.setdefault(result.category, ([], []))
        before.extend(result.pairs_before)
        after.extend(result.pairs_after)
        scored.append(result.scored)
        truths.append(result.truths)

    report.cer = cer_reports_by_category(pairs)
    if scored:
        report.bbox = ap_suite(scored, truths, TASK_BBOX)
        report.segm = ap_suite(scored, truths, TASK_SEGM)

    overall = report.category(OVERALL_CATEGORY)
    logger.info(
        f"Pipeline finished: {len(report.images)} images, {len(report.errors)} errors, "
        f"CER {overall.cer_before:.4f} -> {overall.cer_after:.4f}"
    )
    return report
