"""``avkit`` command line.

Exit codes: 0 ok, 2 usage/configuration, 3 data/format, 4 numerical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import AvkitError, ConfigError
from .metrics import DcfParams

logger = logging.getLogger("avkit")


def cmd_mfcc(args):
    from .frontend import FrontendConfig, extract_features, read_wav

    audio = read_wav(args.input)
    feats = extract_features(audio, FrontendConfig(), rate=args.rate, vad=args.vad)
    frames = feats.frames
    io.save_embeddings(args.out, [str(t) for t in range(frames.shape[0])], frames)
    logger.info("%d frames x %d coefficients -> %s", frames.shape[0], frames.shape[1], args.out)


def cmd_enhance(args):
    from .frontend import FrontendConfig, read_wav, write_wav
    from .wpe import WpeConfig, enhance_waveform

    audio = read_wav(args.input)
    config = WpeConfig(taps=args.taps, delay=args.delay, iterations=args.iters)
    write_wav(args.out, enhance_waveform(audio, FrontendConfig(), config, args.fft))


def cmd_train_backend(args):
    from .backend import train_backend
    from .pipeline import load_training_set

    data = load_training_set(args.emb, args.labels)
    backend = train_backend(data, args.lda_dim, args.em_iters)
    io.save_backend(args.out, backend)
    logger.info("LDA %d -> %d, PLDA trained on %d vectors", data.dim, backend.lda.output_dim, len(data.ids))


def cmd_score_audio(args):
    from .pipeline import group_by_model, score_audio_trials

    backend = io.load_backend(args.model)
    e_ids, E = io.load_embeddings(args.enroll)
    t_ids, T = io.load_embeddings(args.test)
    trials = io.load_trials(args.trials)
    scores = score_audio_trials(
        backend,
        group_by_model(e_ids, E.astype(np.float64)),
        dict(zip(t_ids, T.astype(np.float64))),
        trials,
        "audio",
        args.jobs or 1,
    )
    io.save_scores(args.out, scores)


def cmd_score_face(args):
    from .face import MatchPolicy
    from .pipeline import build_face_templates, score_face_trials

    policy = MatchPolicy(mode=args.mode, k=args.k, p=args.p, iou_threshold=args.iou)
    ids, X = io.load_embeddings(args.emb)
    enroll, test, failed = build_face_templates(
        io.load_detections(args.enroll_det),
        io.load_boxes(args.enroll_boxes) if args.enroll_boxes else None,
        io.load_detections(args.test_det),
        dict(zip(ids, X.astype(np.float64))),
        policy.iou_threshold,
        args.fps,
    )
    if failed:
        logger.warning("enrollment failed for %d video(s)", len(failed))
    scores = score_face_trials(enroll, test, io.load_trials(args.trials), policy, "face", args.jobs or 1)
    io.save_scores(args.out, scores)


def cmd_calibrate(args):
    from .calibration import apply_calibration, train_calibration

    scores = io.load_scores(args.scores)
    model = train_calibration([scores], io.load_key(args.key), args.prior)
    io.save_calibration(args.out, model)
    if args.apply:
        target = io.load_scores(args.apply, scores.system_id)
        io.save_scores(args.llr_out, apply_calibration(model, [target], "calibrated"))


def cmd_fuse(args):
    from .calibration import apply_calibration, train_calibration

    scores = [io.load_scores(p, f"{i}:{Path(p).stem}") for i, p in enumerate(args.scores)]
    if args.model_in:
        model = io.load_calibration(args.model_in)
    else:
        if not args.key:
            raise ConfigError("fuse needs --key to train (or --model-in to apply a model)")
        model = train_calibration(scores, io.load_key(args.key), args.prior)
        model.system_ids = [str(p) for p in args.scores]
    if args.model_out:
        io.save_calibration(args.model_out, model)
    if args.out:
        io.save_scores(args.out, apply_calibration(model, scores, "fused"))


def cmd_evaluate(args):
    from .pipeline import report_for, write_det, write_report

    params = DcfParams(args.p_target, args.c_miss, args.c_fa)
    scores = io.load_scores(args.scores)
    key = io.load_key(args.key)
    report = report_for(scores, key, params)
    if args.out:
        write_report(args.out, report)
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.det:
        write_det(args.det, scores, key)


def cmd_simulate(args):
    from .synth import SynthSpec, synth_generate, write_synth

    spec = SynthSpec.load(args.config) if args.config else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    paths = write_synth(synth_generate(spec), args.out, spec.seed)
    logger.info("synthetic data written to %s (config %s)", paths["dir"], paths["config"])


def cmd_run(args):
    from .pipeline import PipelineConfig, run_pipeline

    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    report = run_pipeline(cfg, resume=args.resume)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def format_table(reports: dict) -> str:
    lines = [f"{'System':<24}{'EER (%)':>10}{'minDCF':>10}{'actDCF':>10}"]
    for name, r in reports.items():
        lines.append(f"{name:<24}{r['eer_percent']:>10.2f}{r['min_dcf']:>10.3f}{r['act_dcf']:>10.3f}")
    return "\n".join(lines)


def cmd_report(args):
    reports = {}
    for path in args.inputs:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if "eer_percent" in data:
            reports[Path(path).stem] = data
        else:
            reports.update(data)
    print(format_table(reports))


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="pipeline (run) or synthetic-data (simulate) YAML config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="avkit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = add("mfcc", help="extract MFCC (+CMN, optional VAD) from a wav")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--rate", type=int, choices=(8000, 16000), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vad", action="store_true")
    p.set_defaults(func=cmd_mfcc)

    p = add("enhance", help="WPE dereverberation of a wav")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taps", type=int, default=10)
    p.add_argument("--delay", type=int, default=3)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--fft", type=int, default=None)
    p.set_defaults(func=cmd_enhance)

    p = add("train-backend", help="train LDA + PLDA on labelled embeddings")
    p.add_argument("--emb", required=True)
    p.add_argument("--labels", help="utt<TAB>speaker file; default: speaker/utt ids")
    p.add_argument("--lda-dim", type=int, default=150)
    p.add_argument("--em-iters", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_backend)

    p = add("score-audio", help="PLDA scoring of trials")
    p.add_argument("--model", required=True)
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_audio)

    p = add("score-face", help="face template matching of trials")
    p.add_argument("--enroll-det", required=True)
    p.add_argument("--enroll-boxes")
    p.add_argument("--test-det", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--mode", choices=("top_k", "top_percent"), default="top_k")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_face)

    p = add("calibrate", help="train a single-system calibration")
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--prior", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--apply", help="score file to calibrate with the trained model")
    p.add_argument("--llr-out", help="output for --apply")
    p.set_defaults(func=cmd_calibrate)

    p = add("fuse", help="train and/or apply a fusion")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--key")
    p.add_argument("--prior", type=float, default=0.05)
    p.add_argument("--out")
    p.add_argument("--model-out")
    p.add_argument("--model-in")
    p.set_defaults(func=cmd_fuse)

    p = add("evaluate", help="EER / minDCF / actDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--p-target", type=float, default=0.05)
    p.add_argument("--c-miss", type=float, default=1.0)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--out")
    p.add_argument("--det", help="write DET points (probit p_fa, probit p_miss)")
    p.set_defaults(func=cmd_evaluate)

    p = add("simulate", help="write a seeded synthetic dataset and pipeline.yaml")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = add("run", help="run the full pipeline from --config")
    p.add_argument("--resume", action="store_true", help="reuse stage outputs that exist")
    p.set_defaults(func=cmd_run)

    p = add("report", help="print report JSON files as a table")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


# filled in after parsing: set_defaults would also rewrite the shared flag
# actions and let a subparser clobber values given before the subcommand
GLOBAL_DEFAULTS = {"config": None, "seed": None, "jobs": None, "verbose": False}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run" and args.config is None:
        parser.error("run needs --config")
    if args.command == "calibrate" and args.apply and not args.llr_out:
        parser.error("--apply needs --llr-out")
    try:
        args.func(args)
    except AvkitError as exc:
        print(f"avkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"avkit: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
