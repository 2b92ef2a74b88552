"""End-to-end orchestration: per-system scoring, fusion and evaluation.

Every stage writes its output to disk and downstream stages read it back, so a
run can resume from any stage and produce the same bytes. Parallelism only
changes how fixed-size chunks are scheduled, never how they are computed.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import io
from .backend import AudioBackend, EmbeddingSet, train_backend
from .calibration import ScoreSet, TrialKey, apply_calibration, train_calibration
from .errors import AvkitError, ConfigError, DataError, MissingScoreError
from .face import FaceTemplate, MatchPolicy, iou, sample_test_frames, template_score
from .frontend import FrontendConfig, extract_features, read_wav, resample
from .metrics import DcfParams, EvalReport, det_points, evaluate, roc_points
from .synth import toy_embedder
from .wpe import WpeConfig, enhance_waveform

logger = logging.getLogger(__name__)

CHUNK = 512


def chunked_map(func, items: list, jobs: int = 1) -> list:
    """``[func(chunk) for chunk in chunks]`` flattened, chunks of fixed size."""
    chunks = [items[i : i + CHUNK] for i in range(0, len(items), CHUNK)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(func, chunks))
    else:
        parts = [func(c) for c in chunks]
    return [x for part in parts for x in part]


def ordered_map(func, items: list, jobs: int = 1) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(func, items))
    return [func(x) for x in items]


# --------------------------------------------------------------------------
# audio scoring


def group_by_model(ids, vectors) -> dict:
    """Group enrollment records by model: ``model`` or ``model/<segment>`` ids."""
    groups: dict = {}
    for uid, vec in zip(ids, vectors):
        groups.setdefault(uid.split("/", 1)[0], []).append(vec)
    return {k: np.vstack(v) for k, v in groups.items()}


def labels_from_ids(ids) -> list:
    """Speaker labels from ``speaker/utterance`` ids."""
    labels = []
    for uid in ids:
        if "/" not in uid:
            raise DataError(f"id {uid!r} has no speaker prefix and no labels file was given")
        labels.append(uid.split("/", 1)[0])
    return labels


def load_training_set(emb_path, labels_path=None) -> EmbeddingSet:
    ids, X = io.load_embeddings(emb_path)
    if labels_path:
        table = io.load_labels(labels_path)
        missing = [u for u in ids if u not in table]
        if missing:
            raise DataError(f"{labels_path}: no speaker label for {missing[:5]}")
        labels = [table[u] for u in ids]
    else:
        labels = labels_from_ids(ids)
    return EmbeddingSet(ids, labels, X.astype(np.float64))


def score_audio_trials(
    backend: AudioBackend, enroll: dict, test: dict, trials: list, system_id: str = "audio", jobs: int = 1
) -> ScoreSet:
    """PLDA LLR per trial. ``enroll`` maps model -> raw vectors, ``test`` segment -> raw vector."""
    from .backend import enroll_template, plda_llr

    models = sorted({m for m, _ in trials})
    segments = sorted({s for _, s in trials})
    missing = [m for m in models if m not in enroll] + [s for s in segments if s not in test]
    if missing:
        raise MissingScoreError(f"no embedding for {len(missing)} trial side(s): {missing[:5]}")
    model_vec = {m: enroll_template(backend.transform(enroll[m])) for m in models}
    seg_matrix = backend.transform(np.vstack([test[s] for s in segments]))
    seg_vec = dict(zip(segments, seg_matrix))

    def score_chunk(chunk):
        E = np.vstack([model_vec[m] for m, _ in chunk])
        T = np.vstack([seg_vec[s] for _, s in chunk])
        return [float(v) for v in plda_llr(backend.plda, E, T)]

    scores = chunked_map(score_chunk, trials, jobs)
    return ScoreSet.from_arrays(system_id, trials, scores)


# --------------------------------------------------------------------------
# face scoring


def build_face_templates(
    enroll_rows: list,
    boxes: list | None,
    test_rows: list,
    embeddings: dict,
    iou_threshold: float = 0.5,
    fps: float | None = None,
    radius: int = 2,
) -> tuple[dict, dict, list]:
    """Enrollment and test templates per video id.

    Enrollment detections are restricted to the given frames +-``radius`` and
    gated against the given boxes of nearby annotated frames. Without boxes,
    every enrollment detection is used. With ``fps``, test detections are
    restricted to the one-per-second sampling grid.
    Returns ``(enroll, test, failed_enroll_videos)``.
    """

    def vec(ref):
        try:
            return embeddings[ref]
        except KeyError:
            raise DataError(f"detection references unknown embedding {ref!r}") from None

    by_video: dict = {}
    for video, frame, box, ref in enroll_rows:
        by_video.setdefault(video, []).append((frame, box, ref))
    given_by_video: dict = {}
    for video, frame, box in boxes or []:
        given_by_video.setdefault(video, []).append((frame, box))

    enroll, failed = {}, []
    for video in sorted(by_video):
        dets = by_video[video]
        try:
            if boxes is None:
                enroll[video] = FaceTemplate(
                    np.vstack([vec(r) for _, _, r in dets]), [f for f, _, _ in dets]
                )
                continue
            given = given_by_video.get(video, [])
            kept_emb, kept_frames = [], []
            for frame, box, ref in dets:
                near = [b for g, b in given if abs(g - frame) <= radius]
                if near and max(iou(box, b) for b in near) > iou_threshold:
                    kept_emb.append(vec(ref))
                    kept_frames.append(frame)
            if not kept_emb:
                raise MissingScoreError(f"enrollment failed for {video}")
            enroll[video] = FaceTemplate(np.vstack(kept_emb), kept_frames)
        except MissingScoreError:
            failed.append(video)

    test_by_video: dict = {}
    for video, frame, box, ref in test_rows:
        test_by_video.setdefault(video, []).append((frame, ref))
    test = {}
    for video in sorted(test_by_video):
        dets = test_by_video[video]
        if fps:
            duration = (max(f for f, _ in dets) + 1) / fps
            grid = {int(round(t * fps)) for t in sample_test_frames(duration)}
            dets = [(f, r) for f, r in dets if f in grid]
        if dets:
            test[video] = FaceTemplate(np.vstack([vec(r) for _, r in dets]), [f for f, _ in dets])
    return enroll, test, failed


def score_face_trials(
    enroll: dict, test: dict, trials: list, policy: MatchPolicy, system_id: str = "face", jobs: int = 1
) -> ScoreSet:
    missing = sorted({m for m, _ in trials if m not in enroll} | {s for _, s in trials if s not in test})
    if missing:
        raise MissingScoreError(f"no face template for {len(missing)} video(s): {missing[:5]}")

    def score_chunk(chunk):
        return [template_score(enroll[m], test[s], policy) for m, s in chunk]

    return ScoreSet.from_arrays(system_id, trials, chunked_map(score_chunk, trials, jobs))


# --------------------------------------------------------------------------
# waveform chain (toy embedder stands in for the neural extractor)


def embed_wav_list(
    entries: list,
    rate: int,
    wpe: WpeConfig | None,
    frontend: FrontendConfig,
    seed: int,
    jobs: int = 1,
) -> np.ndarray:
    """resample -> (WPE) -> MFCC/CMN/VAD -> toy embedding, one row per wav."""

    def one(path):
        audio = resample(read_wav(path), rate)
        if wpe is not None:
            audio = enhance_waveform(audio, frontend, wpe)
        feats = extract_features(audio, frontend, vad=True)
        return toy_embedder(feats, seed=seed)

    return np.vstack(ordered_map(one, [p for _, p in entries], jobs))


def read_wav_list(path, base: Path) -> list:
    rows = []
    for _, (uid, wav) in io._read_rows(path, 2):
        p = Path(wav)
        rows.append((uid, p if p.is_absolute() else base / p))
    return rows


# --------------------------------------------------------------------------
# configuration


SYSTEM_TYPES = ("embeddings", "face", "scores", "wav")


@dataclass
class SystemConfig:
    name: str
    type: str
    options: dict = field(default_factory=dict)

    def path(self, key: str, base: Path, required: bool = True):
        value = self.options.get(key)
        if value is None:
            if required:
                raise ConfigError(f"system {self.name!r} needs {key!r}")
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p


@dataclass
class PipelineConfig:
    base_dir: Path
    output_dir: Path
    systems: list
    fusion: list
    dev: dict | None
    eval: dict
    prior: float = 0.05
    dcf: DcfParams = DcfParams()
    seed: int = 0
    jobs: int = 1
    report_system: str | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir) -> "PipelineConfig":
        base = Path(base_dir)
        if not isinstance(data, dict):
            raise ConfigError("pipeline config must be a mapping")
        if "seed" not in data:
            raise ConfigError("pipeline config needs a 'seed'")
        systems = []
        for block in data.get("systems") or []:
            block = dict(block)
            name, kind = block.pop("name", None), block.pop("type", None)
            if not name or kind not in SYSTEM_TYPES:
                raise ConfigError(f"system needs a name and a type in {SYSTEM_TYPES}: {block}")
            systems.append(SystemConfig(name, kind, block))
        names = [s.name for s in systems]
        if len(set(names)) != len(names):
            raise ConfigError("system names must be unique")
        if not systems:
            raise ConfigError("no systems configured")
        fusion = list(data.get("fusion") or [])
        for n in fusion:
            if n not in names:
                raise ConfigError(f"fusion references unknown system {n!r}")
        report_system = data.get("report_system")
        if not fusion:
            report_system = report_system or names[0]
            if report_system not in names:
                raise ConfigError(f"unknown report_system {report_system!r}")
        dev = data.get("dev")
        if fusion and not dev:
            raise ConfigError("fusion needs a 'dev' block with a key to train on")
        if "eval" not in data:
            raise ConfigError("pipeline config needs an 'eval' block")
        dcf = DcfParams(**(data.get("dcf") or {}))
        return cls(
            base_dir=base,
            output_dir=base / data.get("output_dir", "run"),
            systems=systems,
            fusion=fusion,
            dev=dev,
            eval=data["eval"],
            prior=float(data.get("prior", 0.05)),
            dcf=dcf,
            seed=int(data["seed"]),
            jobs=int(data.get("jobs", 1)),
            report_system=report_system,
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        """Check that every referenced input exists."""
        missing = []
        for part in [p for p in (self.dev, self.eval) if p]:
            for key in ("trials", "key"):
                if part.get(key) and not (self.base_dir / part[key]).exists():
                    missing.append(part[key])
        for system in self.systems:
            for key, value in system.options.items():
                if isinstance(value, str) and key not in ("mode",) and (
                    key.endswith(("_detections", "_boxes", "_labels", "_scores", "_list"))
                    or key in ("train", "enroll", "test", "embeddings")
                ):
                    if not system.path(key, self.base_dir).exists():
                        missing.append(value)
        if missing:
            raise ConfigError(f"missing input file(s): {missing}")


def _partition_trials(cfg: PipelineConfig, part: dict) -> tuple[list, TrialKey | None]:
    key = io.load_key(cfg.base_dir / part["key"]) if part.get("key") else None
    if part.get("trials"):
        trials = io.load_trials(cfg.base_dir / part["trials"])
    elif key is not None:
        trials = key.trials()
    else:
        raise ConfigError("partition needs 'trials' or 'key'")
    return trials, key


# --------------------------------------------------------------------------
# stages


class StageError(AvkitError):
    def __init__(self, stage: str, cause: AvkitError):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.exit_code = cause.exit_code
        self.stage = stage


def _run_system(cfg: PipelineConfig, system: SystemConfig, partitions: dict, resume: bool) -> dict:
    out_dir = cfg.output_dir / "systems" / system.name
    outputs = {name: out_dir / f"{name}.scores" for name in partitions}
    if resume and all(p.exists() for p in outputs.values()):
        return outputs
    base = cfg.base_dir
    opts = system.options

    if system.type == "scores":
        for name in partitions:
            src = system.path(f"{name}_scores", base)
            io.save_scores(outputs[name], io.load_scores(src, system.name))
        return outputs

    if system.type in ("embeddings", "wav"):
        model_path = out_dir / "backend.model"
        if system.type == "wav":
            emb_dir = out_dir / "embeddings"
            rate = int(opts.get("rate", 8000))
            wpe = WpeConfig(**opts["wpe"]) if isinstance(opts.get("wpe"), dict) else (
                WpeConfig() if opts.get("wpe") else None
            )
            frontend = FrontendConfig(**(opts.get("frontend") or {}))
            for role in ("train", "enroll", "test"):
                target = emb_dir / f"{role}.aveb"
                if resume and target.exists():
                    continue
                entries = read_wav_list(system.path(f"{role}_list", base), base)
                vectors = embed_wav_list(entries, rate, wpe, frontend, cfg.seed, cfg.jobs)
                io.save_embeddings(target, [u for u, _ in entries], vectors)
            train_path, enroll_path, test_path = (emb_dir / f"{r}.aveb" for r in ("train", "enroll", "test"))
            labels_path = system.path("train_labels", base, required=False)
        else:
            train_path = system.path("train", base)
            labels_path = system.path("train_labels", base, required=False)
            enroll_path, test_path = system.path("enroll", base), system.path("test", base)
        if not (resume and model_path.exists()):
            train = load_training_set(train_path, labels_path)
            backend = train_backend(train, int(opts.get("lda_dim", 150)), int(opts.get("em_iters", 10)))
            io.save_backend(model_path, backend)
        backend = io.load_backend(model_path)
        e_ids, E = io.load_embeddings(enroll_path)
        t_ids, T = io.load_embeddings(test_path)
        enroll = group_by_model(e_ids, E.astype(np.float64))
        test = dict(zip(t_ids, T.astype(np.float64)))
        for name, trials in partitions.items():
            scores = score_audio_trials(backend, enroll, test, trials, system.name, cfg.jobs)
            io.save_scores(outputs[name], scores)
        return outputs

    if system.type == "face":
        policy = MatchPolicy(
            mode=opts.get("mode", "top_k"),
            k=int(opts.get("k", 10)),
            p=float(opts.get("p", 0.2)),
            iou_threshold=float(opts.get("iou_threshold", 0.5)),
        )
        ids, X = io.load_embeddings(system.path("embeddings", base))
        embeddings = dict(zip(ids, X.astype(np.float64)))
        boxes_path = system.path("enroll_boxes", base, required=False)
        enroll, test, failed = build_face_templates(
            io.load_detections(system.path("enroll_detections", base)),
            io.load_boxes(boxes_path) if boxes_path else None,
            io.load_detections(system.path("test_detections", base)),
            embeddings,
            policy.iou_threshold,
            opts.get("fps"),
        )
        if failed:
            logger.warning("face enrollment failed for %d video(s): %s", len(failed), failed[:5])
        for name, trials in partitions.items():
            scores = score_face_trials(enroll, test, trials, policy, system.name, cfg.jobs)
            io.save_scores(outputs[name], scores)
        return outputs

    raise ConfigError(f"unknown system type {system.type!r}")


def report_for(scores: ScoreSet, key: TrialKey, params: DcfParams) -> EvalReport:
    tar, non = key.split(scores)
    return evaluate(tar, non, params)


def write_report(path, report: EvalReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_det(path, scores: ScoreSet, key: TrialKey) -> None:
    tar, non = key.split(scores)
    points = det_points(roc_points(tar, non))
    io._write_lines(path, (f"{x:.6f}\t{y:.6f}" for x, y in points))


def run_pipeline(cfg: PipelineConfig, resume: bool = False) -> EvalReport:
    """Score every system, fuse on dev, evaluate on eval; return the final report."""
    cfg.validate()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    partitions, keys = {}, {}
    try:
        for name, part in (("dev", cfg.dev), ("eval", cfg.eval)):
            if part:
                partitions[name], keys[name] = _partition_trials(cfg, part)
    except AvkitError as exc:
        raise StageError("trials", exc) from exc
    if keys.get("eval") is None:
        raise ConfigError("the eval partition needs a key")

    outputs = {}
    for system in cfg.systems:
        try:
            outputs[system.name] = _run_system(cfg, system, partitions, resume)
        except AvkitError as exc:
            raise StageError(f"system:{system.name}", exc) from exc

    try:
        per_system = {}
        for system in cfg.systems:
            scores = io.load_scores(outputs[system.name]["eval"], system.name)
            per_system[system.name] = report_for(scores, keys["eval"], cfg.dcf).to_dict()
        with open(out / "systems_report.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(per_system, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except AvkitError as exc:
        raise StageError("system-reports", exc) from exc

    try:
        if cfg.fusion:
            model_path = out / "fusion.model"
            if not (resume and model_path.exists()):
                dev_scores = [io.load_scores(outputs[n]["dev"], n) for n in cfg.fusion]
                model = train_calibration(dev_scores, keys["dev"], cfg.prior)
                io.save_calibration(model_path, model)
            model = io.load_calibration(model_path)
            eval_scores = [io.load_scores(outputs[n]["eval"], n) for n in cfg.fusion]
            fused = apply_calibration(model, eval_scores, "fused", partitions["eval"])
            io.save_scores(out / "fused.tsv", fused)
            final_path = out / "fused.tsv"
        else:
            final_path = outputs[cfg.report_system]["eval"]
    except AvkitError as exc:
        raise StageError("fusion", exc) from exc

    try:
        final = io.load_scores(final_path, "final")
        report = report_for(final, keys["eval"], cfg.dcf)
        write_report(out / "report.json", report)
        write_det(out / "det.tsv", final, keys["eval"])
    except AvkitError as exc:
        raise StageError("evaluate", exc) from exc
    return report
