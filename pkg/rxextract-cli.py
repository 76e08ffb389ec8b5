#!/usr/bin/env python3
"""
RxExtract v1.0.0 - CLI

Commands:
- gen-fixtures   : Generate seeded synthetic prescription fixtures
- init-weights   : Write seeded random detector + recognizer weights (RXW1)
- segment        : Run the detector on one PGM image
- recognize      : Run the recognizer on one PGM image (or a box inside it)
- match          : Match query strings against a lexicon
- eval           : Score line-aligned reference/hypothesis files before and after matching
- pipeline       : End-to-end run over a fixture directory, writes a report
- status         : Show configuration, ledger counts and log paths

Exit codes: 0 success, 1 configuration/format error, 2 partial failures recorded in the report

Usage:
    rxextract-cli.py gen-fixtures --lexicon lexicon.csv --seed 7 --count 50 --out fixtures/
    rxextract-cli.py init-weights --seed 7 --out weights.rxw
    rxextract-cli.py pipeline --input fixtures/ --lexicon lexicon.csv --weights weights.rxw --report report.json
"""

import os
import sys
import json
import argparse
from datetime import datetime
from pathlib import Path

# Add project root to path
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, PROJECT_ROOT)

from config import get_config
from app.detector import segment_image
from app.errors import AlignmentError, RxExtractError
from app.fixtures import gen_fixtures, read_pgm, save_fixtures
from app.matcher import decide, load_lexicon
from app.metrics import OVERALL_CATEGORY, compare_before_after, render_ap_table, render_cer_table
from app.models import AuditLog, RunHistory
from app.pipeline import PipelineConfig, crop_region, run_pipeline
from app.recognizer import Vocab, recognize
from app.storage import ReportStore
from app.weights import init_weights, load_weights, save_weights
from main import create_runtime

# Flags shared by every command that builds a PipelineConfig; dest names are PipelineConfig fields
MODEL_FLAGS = (
    ('--t-l', float, 'Levenshtein similarity threshold T_L (0-100)'),
    ('--t-f', float, 'fuzzy ratio threshold T_F (0-100)'),
    ('--proposal-threshold', float, 'RPN objectness threshold'),
    ('--nms-iou', float, 'NMS IoU threshold'),
    ('--roi-size', int, 'RoI Align output size'),
    ('--channels', int, 'detector channel count'),
    ('--patch-size', int, 'recognizer patch size p'),
    ('--d-model', int, 'recognizer width d'),
    ('--heads', int, 'attention heads'),
    ('--layers', int, 'encoder/decoder layers N'),
    ('--max-len', int, 'decoder output positions L_max'),
    ('--max-patches', int, 'positional table size'),
    ('--ffn-dim', int, 'FFNN hidden width'),
    ('--init-scale', float, 'uniform init scale'),
)


def banner(title: str):
    print(f"\n{'='*60}")
    print(f"RxExtract - {title}")
    print(f"{'='*60}\n")


def add_model_arguments(parser):
    for flag, kind, text in MODEL_FLAGS:
        parser.add_argument(flag, type=kind, default=None, help=text)


def pipeline_config(args, **extra) -> PipelineConfig:
    overrides = {flag[2:].replace('-', '_'): getattr(args, flag[2:].replace('-', '_')) for flag, _, _ in MODEL_FLAGS}
    overrides.update(extra)
    return PipelineConfig.from_config(get_config(), **overrides)


def print_json(data):
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_gen_fixtures(args):
    """Generate seeded fixtures"""
    banner("Fixture Generation")
    runtime = create_runtime()

    lexicon = load_lexicon(args.lexicon)
    fixtures = gen_fixtures(
        seed=args.seed,
        count=args.count,
        lexicon=lexicon,
        p_noise=args.p_noise,
        category=args.category,
        height=runtime.config.FIXTURE_HEIGHT,
        width=runtime.config.FIXTURE_WIDTH,
        brightness_jitter=args.brightness_jitter,
        noise_std=args.noise_std,
        max_flips=args.max_flips,
    )
    out = save_fixtures(fixtures, args.out, lexicon)
    runtime.audit.log_fixtures_generated(str(out), args.seed, args.count, args.p_noise)

    print(f"[SUCCESS] {len(fixtures)} fixtures written to {out}")
    print(f"  - Seed: {args.seed}")
    print(f"  - Category: {args.category}")
    print(f"  - p_noise: {args.p_noise}")
    print()
    return 0


def cmd_init_weights(args):
    """Write seeded random weights"""
    banner("Weight Initialization")
    runtime = create_runtime()

    config = pipeline_config(args, seed=args.seed)
    config.validate()
    bundle = init_weights(args.seed, config.channels, config.recognizer_config(), Vocab().size, config.init_scale)
    save_weights(bundle, args.out)
    runtime.audit.log_weights_init(args.out, args.seed, config.init_scale)

    tensors = bundle.to_tensors()
    print(f"[SUCCESS] {len(tensors)} tensors written to {args.out}")
    print(f"  - Seed: {args.seed}")
    print(f"  - Scale: {config.init_scale}")
    print()
    return 0


def cmd_segment(args):
    """Run the detector on one image"""
    config = pipeline_config(args, weights_path=args.weights)
    config.validate()

    weights = load_weights(args.weights).require_detector()
    image = read_pgm(args.image).astype('float32') / 255.0
    detections = segment_image(image, weights, config.detector_config())
    print_json([d.to_record() for d in detections])
    return 0


def cmd_recognize(args):
    """Run the recognizer on one image or a box inside it"""
    config = pipeline_config(args, weights_path=args.weights)
    config.validate()

    weights = load_weights(args.weights).require_recognizer()
    image = read_pgm(args.image).astype('float32') / 255.0
    region = crop_region(image, args.box) if args.box else image
    tokens = recognize(region, weights, Vocab(), config.recognizer_config())
    print_json(tokens.to_record())
    return 0


def cmd_match(args):
    """Match queries against a lexicon"""
    config = pipeline_config(args)
    matcher_config = config.matcher_config()
    matcher_config.validate()

    lexicon = load_lexicon(args.lexicon)
    print_json([decide(query, lexicon, matcher_config).to_record() for query in args.queries])
    return 0


def _read_lines(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        return [line.rstrip('\n').rstrip('\r') for line in f]


def cmd_eval(args):
    """Score hypothesis lines before and after lexicon matching"""
    banner("CER Evaluation")
    runtime = create_runtime()
    config = pipeline_config(args)
    matcher_config = config.matcher_config()
    matcher_config.validate()

    lexicon = load_lexicon(args.lexicon)
    references = _read_lines(args.refs)
    hypotheses = _read_lines(args.hyps)
    if len(references) != len(hypotheses):
        raise AlignmentError(f"{len(references)} reference lines vs {len(hypotheses)} hypothesis lines")

    before = list(zip(references, hypotheses))
    after = [(ref, decide(hyp, lexicon, matcher_config).hypothesis) for ref, hyp in before]
    report = compare_before_after(before, after, args.category)

    print(render_cer_table([report]))
    print()
    if args.out:
        result = ReportStore().emit_report(report, Path(args.out).resolve())
        runtime.audit.log_report_emitted(result['path'], result['checksum'])
        print(f"Report: {result['path']}")
    return 0


def cmd_pipeline(args):
    """End-to-end run over a fixture directory"""
    banner("Pipeline Run")
    runtime = create_runtime()
    started = datetime.utcnow()

    report_path = Path(args.report or runtime.config.REPORT_PATH).resolve()
    config = pipeline_config(
        args,
        weights_path=args.weights,
        lexicon_path=args.lexicon,
        input_dir=args.input,
        report_path=str(report_path),
        seed=args.seed,
        parallelism=args.parallelism,
        bypass=args.bypass,
    )
    runtime.audit.log_run_start('pipeline', config.echo())

    report = run_pipeline(config)
    for error in report.errors:
        runtime.audit.log_image_failed(error['image'], error['error'])

    result = ReportStore().emit_report(report, report_path)
    runtime.audit.log_report_emitted(result['path'], result['checksum'])

    status = runtime.config.RUN_STATUS_PARTIAL if report.partial else runtime.config.RUN_STATUS_SUCCESS
    overall = report.category(OVERALL_CATEGORY)
    session = runtime.session()
    session.add(RunHistory(
        command='pipeline',
        seed=report.seed,
        config_echo=json.dumps(config.echo(), sort_keys=True),
        status=status,
        image_count=len(report.images),
        error_count=len(report.errors),
        cer_before=f"{overall.cer_before:.4f}",
        cer_after=f"{overall.cer_after:.4f}",
        report_path=result['path'],
        report_sha256=result['checksum'],
        started_at=started,
        completed_at=datetime.utcnow(),
    ))
    session.commit()
    runtime.audit.log_run_complete('pipeline', len(report.images), len(report.errors), status)

    print(render_cer_table(report.cer))
    print()
    if report.bbox is not None and report.segm is not None:
        print(render_ap_table(report.bbox, report.segm))
        print()
    if report.errors:
        print(f"[WARNING] {len(report.errors)} image(s) failed; see the report's error list")
    print(f"Report: {result['path']}")
    print(f"SHA256: {result['checksum']}")
    print()
    return report.exit_code


def cmd_status(args):
    """Show system status"""
    banner("System Status")
    runtime = create_runtime()
    config = runtime.config

    print(f"Version: {config.APP_VERSION}")
    print(f"Thresholds: T_L={config.T_L} T_F={config.T_F} proposal={config.PROPOSAL_THRESHOLD} nms={config.NMS_IOU}")
    print(f"Recognizer: p={config.PATCH_SIZE} d={config.D_MODEL} heads={config.HEADS} "
          f"N={config.LAYERS} L_max={config.MAX_LEN}")

    # Ledger
    try:
        session = runtime.session()
        run_count = session.query(RunHistory).count()
        partial_count = session.query(RunHistory).filter(RunHistory.status == config.RUN_STATUS_PARTIAL).count()
        audit_count = session.query(AuditLog).count()
        last_run = session.query(RunHistory).order_by(RunHistory.id.desc()).first()

        print(f"Ledger: [OK] {config.DATABASE_PATH}")
        print(f"  - Runs: {run_count}")
        print(f"  - Partial runs: {partial_count}")
        print(f"  - Audit events: {audit_count}")
        if last_run:
            print(f"  - Last run: {last_run.status} at {last_run.started_at} ({last_run.report_path})")
    except Exception as e:
        print(f"Ledger: [ERROR] {e}")

    # Logs
    log_path = Path(config.LOG_PATH)
    if log_path.exists():
        print(f"Logs: [OK] {log_path}")
    else:
        print(f"Logs: [NOT CREATED] {log_path}")
    print()
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='rxextract',
        description='RxExtract - medicine-name extraction pipeline CLI'
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    fixtures_parser = subparsers.add_parser('gen-fixtures', help='Generate synthetic fixtures')
    fixtures_parser.add_argument('--lexicon', required=True, help='Lexicon CSV the transcripts are drawn from')
    fixtures_parser.add_argument('--seed', type=int, required=True)
    fixtures_parser.add_argument('--count', type=int, default=20)
    fixtures_parser.add_argument('--out', required=True, help='Output directory')
    fixtures_parser.add_argument('--p-noise', type=float, default=0.0, help='Per-character flip probability')
    fixtures_parser.add_argument('--max-flips', type=int, default=None, help='Cap on flips per transcript')
    fixtures_parser.add_argument('--category', default='valid',
                                 help="Category label, e.g. valid, pattern-change, test ('all' is reserved)")
    fixtures_parser.add_argument('--brightness-jitter', type=float, default=0.0)
    fixtures_parser.add_argument('--noise-std', type=float, default=0.0)

    weights_parser = subparsers.add_parser('init-weights', help='Write seeded random weights')
    weights_parser.add_argument('--seed', type=int, required=True)
    weights_parser.add_argument('--out', required=True, help='RXW1 output file')
    add_model_arguments(weights_parser)

    segment_parser = subparsers.add_parser('segment', help='Detect regions in one image')
    segment_parser.add_argument('--weights', required=True)
    segment_parser.add_argument('--image', required=True, help='PGM (P5) image')
    add_model_arguments(segment_parser)

    recognize_parser = subparsers.add_parser('recognize', help='Recognize text in one image')
    recognize_parser.add_argument('--weights', required=True)
    recognize_parser.add_argument('--image', required=True, help='PGM (P5) image')
    recognize_parser.add_argument('--box', type=float, nargs=4, metavar=('X1', 'Y1', 'X2', 'Y2'), default=None)
    add_model_arguments(recognize_parser)

    match_parser = subparsers.add_parser('match', help='Match strings against a lexicon')
    match_parser.add_argument('--lexicon', required=True)
    match_parser.add_argument('queries', nargs='+')
    add_model_arguments(match_parser)

    eval_parser = subparsers.add_parser('eval', help='CER before/after matching for text files')
    eval_parser.add_argument('--refs', required=True, help='Reference transcripts, one per line')
    eval_parser.add_argument('--hyps', required=True, help='Recognizer output, one per line')
    eval_parser.add_argument('--lexicon', required=True)
    eval_parser.add_argument('--category', default='valid')
    eval_parser.add_argument('--out', default=None, help='Optional JSON report path')
    add_model_arguments(eval_parser)

    pipeline_parser = subparsers.add_parser('pipeline', help='End-to-end run over fixtures')
    pipeline_parser.add_argument('--input', required=True, help='Fixture directory')
    pipeline_parser.add_argument('--lexicon', required=True)
    pipeline_parser.add_argument('--weights', default=None, help='RXW1 weights (random init from --seed when omitted)')
    pipeline_parser.add_argument('--seed', type=int, default=None)
    pipeline_parser.add_argument('--report', default=None)
    pipeline_parser.add_argument('--parallelism', type=int, default=None)
    pipeline_parser.add_argument('--bypass', action='store_true',
                                 help='Feed ground-truth regions and corrupted transcripts to the matcher')
    add_model_arguments(pipeline_parser)

    subparsers.add_parser('status', help='Show system status')
    return parser


COMMANDS = {
    'gen-fixtures': cmd_gen_fixtures,
    'init-weights': cmd_init_weights,
    'segment': cmd_segment,
    'recognize': cmd_recognize,
    'match': cmd_match,
    'eval': cmd_eval,
    'pipeline': cmd_pipeline,
    'status': cmd_status,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    handler = COMMANDS.get(args.command)
    if handler is None:
        parser.print_help()
        return 0
    try:
        return handler(args)
    except (RxExtractError, OSError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
