import json

import numpy as np
import pytest

from app.errors import AlignmentError, ConfigurationError, RangeError, UndefinedReferenceError
from app.geometry import box_iou
from app.metrics import (
    AREA_MEDIUM, IOU_THRESHOLDS, ApReport, CerReport, ScoredRegion, TruthRegion, ap_suite,
    average_precision, cer, cer_reports_by_category, compare_before_after, corpus_counts,
    corpus_cer, precision_recall_area, render_ap_table, render_cer_table,
)

# Published before/after rows: (category, before, after, printed improvement)
PUBLISHED_CER_ROWS = [
    ('Handwritten Valid', 0.0143, 0.0137, 0.0006),
    ('Handwritten Pattern Change', 0.0670, 0.0386, 0.0386),
    ('Printed Test', 0.2910, 0.2937, -0.0027),
    ('Printed Valid', 0.0127, 0.0127, 0.0),
]


def _edit_distance(a, b):
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        previous, row[0] = row[0], i
        for j, cb in enumerate(b, start=1):
            previous, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, previous + (ca != cb))
    return row[-1]


class TestCer:
    def test_examples(self):
        assert cer('panadol', 'panadol') == 0.0
        assert cer('amoxil', 'amoxyl') == pytest.approx(1 / 6)
        assert cer('abc', '') == 1.0

    def test_empty_reference(self):
        with pytest.raises(UndefinedReferenceError):
            cer('', 'abc')

    def test_matches_dp_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ref = ''.join(rng.choice(list('abc '), size=int(rng.integers(1, 10))))
            hyp = ''.join(rng.choice(list('abc '), size=int(rng.integers(0, 10))))
            assert cer(ref, hyp) == _edit_distance(ref, hyp) / len(ref)

    def test_corpus_is_micro_averaged(self):
        assert corpus_cer([('ab', 'ab'), ('cd', 'ce')]) == 0.25
        assert corpus_cer([('a', 'b'), ('aaaa', 'aaaa')]) == pytest.approx(0.2)
        assert corpus_cer([('panadol', 'panadol'), ('risek', 'risek')]) == 0.0

    def test_corpus_names_empty_reference(self):
        with pytest.raises(UndefinedReferenceError, match='index 1'):
            corpus_cer([('a', 'a'), ('', 'b')])

    def test_concatenation_combines_counts(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            parts = [
                [(''.join(rng.choice(list('xyz'), size=int(rng.integers(1, 6)))),
                  ''.join(rng.choice(list('xyz'), size=int(rng.integers(0, 6)))))
                 for _ in range(int(rng.integers(1, 5)))]
                for _ in range(2)
            ]
            (e1, c1), (e2, c2) = corpus_counts(parts[0]), corpus_counts(parts[1])
            assert corpus_cer(parts[0] + parts[1]) == (e1 + e2) / (c1 + c2)


class TestCompareBeforeAfter:
    def test_counts_and_improvement(self):
        report = compare_before_after(
            [('panadol', 'panad0l'), ('risek', 'risk')],
            [('panadol', 'panadol'), ('risek', '')],
            'handwritten',
        )
        assert report.pairs == 2 and report.reference_chars == 12
        assert report.edits_before == 2 and report.edits_after == 5
        assert report.cer_before == pytest.approx(2 / 12)
        assert report.improvement == pytest.approx(-3 / 12)

    def test_identical_sets(self):
        pairs = [('amoxil', 'amoxyl')]
        assert compare_before_after(pairs, pairs, 'x').improvement == 0.0

    def test_misaligned_references(self):
        with pytest.raises(AlignmentError):
            compare_before_after([('a', 'a')], [('b', 'a')], 'x')
        with pytest.raises(AlignmentError):
            compare_before_after([('a', 'a')], [], 'x')

    def test_no_pairs(self):
        report = compare_before_after([], [], 'empty')
        assert (report.cer_before, report.cer_after, report.pairs) == (0.0, 0.0, 0)

    @pytest.mark.parametrize('category, before, after, printed', PUBLISHED_CER_ROWS)
    def test_published_rows(self, category, before, after, printed):
        report = CerReport(category=category, cer_before=before, cer_after=after)
        record = report.to_record()
        assert record['cer_before'] == before and record['cer_after'] == after
        if category == 'Handwritten Pattern Change':
            assert record['improvement'] == 0.0284
            assert report.improvement_discrepancy(printed)
        else:
            assert record['improvement'] == printed
            assert not report.improvement_discrepancy(printed)

    def test_record_improvement_is_recomputed(self):
        record = {'category': 'c', 'cer_before': 0.0670, 'cer_after': 0.0386, 'improvement': 0.0386}
        assert CerReport.from_record(record).to_record()['improvement'] == 0.0284

    def test_by_category_appends_overall(self):
        pairs = {
            'printed': ([('ab', 'ab')], [('ab', 'ab')]),
            'handwritten': ([('cd', 'xx')], [('cd', 'cd')]),
        }
        reports = cer_reports_by_category(pairs)
        assert [r.category for r in reports] == ['handwritten', 'printed', 'all']
        assert reports[-1].cer_before == 0.5 and reports[-1].cer_after == 0.0
        assert [r.category for r in cer_reports_by_category(pairs, overall=None)] == ['handwritten', 'printed']

    def test_render_cer_table(self):
        reports = [CerReport(category=c, cer_before=b, cer_after=a) for c, b, a, _ in PUBLISHED_CER_ROWS]
        table = render_cer_table(reports).splitlines()
        assert table[0].split(' | ')[0].strip() == 'Data Category'
        assert len(table) == 2 + len(PUBLISHED_CER_ROWS)
        assert table[2].split(' | ')[1:] == ['       0.0143', '      0.0137', '     0.0006']
        assert table[4].rstrip().endswith('-0.0027')
        assert table[5].rstrip().endswith(' 0.0000')


def _box_scene(rng, images):
    detections, truths = [], []
    for _ in range(images):
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = (int(v) for v in rng.integers(0, 12, size=2))
            w, h = (int(v) for v in rng.integers(2, 8, size=2))
            gts.append(TruthRegion(box=(x, y, x + w, y + h)))
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            if gts and rng.uniform() < 0.6:
                base = gts[int(rng.integers(len(gts)))].box
                jitter = rng.integers(-2, 3, size=4)
                box = tuple(float(b + j) for b, j in zip(base, jitter))
                if box[2] <= box[0] or box[3] <= box[1]:
                    box = tuple(float(b) for b in base)
            else:
                x, y = (int(v) for v in rng.integers(0, 12, size=2))
                box = (float(x), float(y), float(x + rng.integers(2, 8)), float(y + rng.integers(2, 8)))
            dets.append(box)
        scores = rng.permutation(len(dets)) / 10.0 + 0.05
        detections.append([ScoredRegion(score=float(s), box=b) for s, b in zip(scores, dets)])
        truths.append(gts)
    return detections, truths


def _oracle_ap(detections, truths, threshold):
    positives = sum(len(t) for t in truths)
    order = sorted(
        [(d.score, i, k) for i, dets in enumerate(detections) for k, d in enumerate(dets)],
        key=lambda item: (-item[0], item[1], item[2]),
    )
    claimed = set()
    flags = []
    for _, image, index in order:
        box = detections[image][index].box
        candidates = [
            (box_iou(box, gt.box), -g) for g, gt in enumerate(truths[image])
            if (image, g) not in claimed and box_iou(box, gt.box) >= threshold
        ]
        if candidates:
            claimed.add((image, -max(candidates)[1]))
            flags.append(True)
        else:
            flags.append(False)
    if positives == 0:
        return 100.0 if not flags else 0.0
    precisions = []
    hits = 0
    for rank, flag in enumerate(flags, start=1):
        hits += flag
        precisions.append(hits / rank)
    total = 0.0
    for rank, flag in enumerate(flags):
        if flag:
            total += max(precisions[rank:]) / positives
    return 100.0 * total


class TestAveragePrecision:
    def _single(self, *dets, gts=((0, 0, 10, 10),), threshold=0.5):
        return average_precision(
            [[ScoredRegion(score=s, box=b) for s, b in dets]],
            [[TruthRegion(box=b) for b in gts]],
            threshold,
        )

    def test_exact_detection(self):
        assert self._single((0.9, (0, 0, 10, 10))) == 100.0

    def test_no_detections(self):
        assert self._single() == 0.0

    def test_false_positive_after_true_positive(self):
        assert self._single((0.9, (0, 0, 10, 10)), (0.8, (50, 50, 60, 60))) == 100.0

    def test_false_positive_before_true_positive(self):
        assert self._single((0.8, (0, 0, 10, 10)), (0.9, (50, 50, 60, 60))) == pytest.approx(50.0)

    def test_duplicate_detection_is_a_false_positive(self):
        ap = self._single((0.9, (0, 0, 10, 10)), (0.8, (0, 0, 10, 10)), gts=((0, 0, 10, 10), (30, 30, 40, 40)))
        assert ap == pytest.approx(50.0)

    def test_empty_ground_truth(self):
        assert self._single(gts=()) == 100.0
        assert self._single((0.5, (0, 0, 4, 4)), gts=()) == 0.0

    def test_threshold_range(self):
        with pytest.raises(ConfigurationError):
            self._single(threshold=1.0)

    def test_image_count_must_agree(self):
        with pytest.raises(AlignmentError):
            average_precision([[]], [[], []], 0.5)

    def test_pr_curve_helper(self):
        assert precision_recall_area([True, False, True], 2) == pytest.approx(100 * (0.5 * 1 + 0.5 * 2 / 3))
        assert precision_recall_area([], 0) == 100.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            detections, truths = _box_scene(rng, int(rng.integers(1, 3)))
            for threshold in (0.3, 0.5, 0.75):
                assert average_precision(detections, truths, threshold) == pytest.approx(
                    _oracle_ap(detections, truths, threshold), abs=1e-9)

    def test_top_scoring_true_positive_never_lowers_ap(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            detections, truths = _box_scene(rng, 1)
            before = average_precision(detections, truths, 0.5)
            extra = (100.0, 100.0, 110.0, 110.0)
            after = average_precision(
                [detections[0] + [ScoredRegion(score=2.0, box=extra)]],
                [truths[0] + [TruthRegion(box=extra)]],
                0.5,
            )
            assert after >= before - 1e-12

    def test_area_range_ignores_outside_truths(self):
        small, medium = (0, 0, 10, 10), (100, 100, 140, 140)
        detections = [[ScoredRegion(0.9, small), ScoredRegion(0.8, medium)]]
        truths = [[TruthRegion(small), TruthRegion(medium)]]
        assert average_precision(detections, truths, 0.5, area_range=AREA_MEDIUM) == 100.0
        assert average_precision(detections, [[TruthRegion(small)]], 0.5, area_range=AREA_MEDIUM) is None

    def test_segm_uses_masks(self):
        gt_mask = np.zeros((16, 16), bool)
        gt_mask[2:6, 2:6] = True
        half = np.zeros((16, 16), bool)
        half[2:6, 2:4] = True
        truths = [[TruthRegion(box=(2, 2, 6, 6), mask=gt_mask)]]
        detections = [[ScoredRegion(score=0.9, box=(2, 2, 6, 6), mask=half)]]
        assert average_precision(detections, truths, 0.5, task='segm') == 100.0
        assert average_precision(detections, truths, 0.6, task='segm') == 0.0
        assert average_precision(detections, truths, 0.6, task='bbox') == 100.0


class TestApSuite:
    def _perfect_scene(self):
        boxes = [(0, 0, 100, 100), (150, 0, 190, 40)]
        masks = []
        for x1, y1, x2, y2 in boxes:
            mask = np.zeros((128, 256), bool)
            mask[y1:y2, x1:x2] = True
            masks.append(mask)
        truths = [[TruthRegion(box=b, mask=m) for b, m in zip(boxes, masks)]]
        detections = [[ScoredRegion(score=0.9 - 0.1 * i, box=b, mask=m) for i, (b, m) in enumerate(zip(boxes, masks))]]
        return detections, truths

    def test_thresholds(self):
        assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    @pytest.mark.parametrize('task', ['bbox', 'segm'])
    def test_perfect_detections(self, task):
        report = ap_suite(*self._perfect_scene(), task=task)
        assert (report.ap, report.ap50, report.ap75, report.ap_m, report.ap_l) == (100.0,) * 5

    def test_missing_medium_subset_is_null(self):
        detections = [[ScoredRegion(0.9, (0, 0, 100, 100))]]
        truths = [[TruthRegion((0, 0, 100, 100))]]
        report = ap_suite(detections, truths)
        assert report.ap_m is None and report.ap_l == 100.0
        assert report.to_record()['ap_m'] is None

    def test_published_values_survive_serialisation(self):
        bbox = ApReport('bbox', 51.251, 77.227, 60.046, 54.201, 48.096)
        segm = ApReport('segm', 48.299, 79.354, 62.434, 49.172, 47.708)
        for report in (bbox, segm):
            text = json.dumps(report.to_record(), sort_keys=True)
            assert ApReport.from_record(json.loads(text)) == report
        assert bbox.to_record()['ap'] == 51.251 and segm.to_record()['ap'] == 48.299

    def test_values_outside_range(self):
        with pytest.raises(RangeError):
            ApReport('bbox', 101.0, 0.0, 0.0)

    def test_render_ap_table(self):
        bbox = ApReport('bbox', 51.251, 77.227, 60.046, 54.201, 48.096)
        segm = ApReport('segm', 48.299, 79.354, 62.434, None, 47.708)
        lines = render_ap_table(bbox, segm).splitlines()
        assert [line.split('|')[0].strip() for line in lines[2:]] == ['AP', 'AP50', 'AP75', 'APm', 'APl']
        assert lines[2].split('|')[1].strip() == '51.251'
        assert lines[2].split('|')[2].strip() == '48.299'
        assert lines[5].split('|')[2].strip() == '-'
