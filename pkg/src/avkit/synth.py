"""Seeded synthetic data: two-covariance embeddings, face detections, tone corpora.

Randomness comes from numpy's PCG64 bit generator seeded with the integer
seed, so identical seeds give identical bytes on any platform.

Audio and face identities are drawn independently per speaker,
``y ~ N(mu, B)``; each session adds ``e ~ N(0, W)``. Face frames add a small
isotropic frame jitter on top of the session offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ContractError
from .face import BoundingBox, sample_test_frames, select_enroll_frames
from .frontend import AudioBuffer, FeatureMatrix


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class ModalitySpec:
    mu: np.ndarray
    B: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        d = self.mu.shape[0]
        if self.B.shape != (d, d) or self.W.shape != (d, d):
            raise ConfigError(f"covariances must be {d}x{d}")
        for name, M in (("B", self.B), ("W", self.W)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ConfigError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-10:
                raise ConfigError(f"{name} must be positive semi-definite")

    @classmethod
    def isotropic(cls, dim: int, between: float, within: float, offset: float = 0.0):
        return cls(np.full(dim, offset), between * np.eye(dim), within * np.eye(dim))

    def sample(self, rng, cov_name: str, n: int) -> np.ndarray:
        cov = self.B if cov_name == "B" else self.W
        # Cholesky of a PSD matrix via eigh keeps B = 0 valid
        vals, vecs = np.linalg.eigh(cov)
        factor = vecs * np.sqrt(np.clip(vals, 0, None))
        return rng.standard_normal((n, cov.shape[0])) @ factor.T


def _default_audio():
    return ModalitySpec.isotropic(16, between=1.0, within=0.8, offset=0.5)


def _default_face():
    return ModalitySpec.isotropic(16, between=1.0, within=0.6)


@dataclass
class SynthSpec:
    n_speakers: int = 200
    sessions_per_speaker: int = 20
    dim: int = 16
    n_train_speakers: int = 300
    train_sessions: int = 8
    n_targets: int = 2000
    n_nontargets: int = 10000
    audio: ModalitySpec = field(default_factory=_default_audio)
    face: ModalitySpec = field(default_factory=_default_face)
    face_frame_jitter: float = 0.3
    given_frames: int = 2
    enroll_video_frames: int = 150
    fps: int = 25
    test_duration: tuple = (4.0, 12.0)
    distractor_rate: float = 0.3
    seed: int = 1234

    def validate(self) -> None:
        if min(self.n_speakers, self.sessions_per_speaker, self.dim, self.n_targets,
               self.n_nontargets, self.n_train_speakers, self.train_sessions) < 1:
            raise ConfigError("all SynthSpec counts must be >= 1")
        if self.n_speakers < 4:
            raise ConfigError("need at least 4 speakers (2 per partition)")
        for name, mod in (("audio", self.audio), ("face", self.face)):
            if mod.mu.shape[0] != self.dim:
                raise ConfigError(f"{name} modality has dim {mod.mu.shape[0]}, spec dim {self.dim}")
        half = self.n_speakers // 2
        if self.n_targets > half * self.sessions_per_speaker:
            raise ConfigError(
                f"{self.n_targets} targets requested but each partition has only "
                f"{half * self.sessions_per_speaker} target pairs"
            )
        if self.n_nontargets > half * (half - 1) * self.sessions_per_speaker:
            raise ConfigError("more nontargets requested than distinct pairs exist")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SynthSpec fields: {sorted(unknown)}")
        dim = int(data.get("dim", cls.dim))
        for name, default in (("audio", (1.0, 0.8, 0.5)), ("face", (1.0, 0.6, 0.0))):
            block = data.get(name)
            if block is None:
                data[name] = ModalitySpec.isotropic(dim, *default)
            elif isinstance(block, dict) and "B" in block:
                data[name] = ModalitySpec(block.get("mu", np.zeros(dim)), block["B"], block["W"])
            elif isinstance(block, dict):
                data[name] = ModalitySpec.isotropic(
                    dim,
                    float(block.get("between", default[0])),
                    float(block.get("within", default[1])),
                    float(block.get("offset", default[2])),
                )
            else:
                raise ConfigError(f"bad {name} modality block")
        if "test_duration" in data:
            data["test_duration"] = tuple(data["test_duration"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class Partition:
    models: list
    segments: list
    trials: list
    labels: list


@dataclass
class SynthData:
    """Everything ``synth_generate`` produces, keyed by file role."""

    train_ids: list
    train_labels: list
    train_vectors: np.ndarray
    enroll_ids: list
    enroll_vectors: np.ndarray
    test_ids: list
    test_vectors: np.ndarray
    face_ids: list
    face_vectors: np.ndarray
    enroll_detections: list
    enroll_boxes: list
    test_detections: list
    partitions: dict


def _jitter_box(rng, box: BoundingBox, pixels: float) -> BoundingBox:
    dx, dy, dw, dh = np.round(rng.uniform(-pixels, pixels, 4))
    return BoundingBox(box.x + dx, box.y + dy, max(8.0, box.w + dw), max(8.0, box.h + dh))


def _sample_nontargets(rng, models, segments_by_model, n) -> list:
    """Distinct (model, segment) pairs across speakers, drawn by index."""
    all_segments = [(s, m) for m in models for s in segments_by_model[m]]
    chosen, seen = [], set()
    while len(chosen) < n:
        mi = int(rng.integers(len(models)))
        si = int(rng.integers(len(all_segments)))
        seg, owner = all_segments[si]
        model = models[mi]
        if owner == model or (model, seg) in seen:
            continue
        seen.add((model, seg))
        chosen.append((model, seg))
    return chosen


def synth_generate(spec: SynthSpec) -> SynthData:
    spec.validate()
    rng = make_rng(spec.seed)
    d = spec.dim

    # backend training speakers (audio only)
    n_train = spec.n_train_speakers * spec.train_sessions
    y_train = spec.audio.mu + spec.audio.sample(rng, "B", spec.n_train_speakers)
    train_vectors = np.repeat(y_train, spec.train_sessions, axis=0) + spec.audio.sample(rng, "W", n_train)
    train_ids, train_labels = [], []
    for s in range(spec.n_train_speakers):
        for j in range(spec.train_sessions):
            train_ids.append(f"trn{s:04d}/u{j:02d}")
            train_labels.append(f"trn{s:04d}")

    # evaluation speakers: independent identities per modality
    S = spec.n_speakers
    y_audio = spec.audio.mu + spec.audio.sample(rng, "B", S)
    y_face = spec.face.mu + spec.face.sample(rng, "B", S)
    n_seg = S * spec.sessions_per_speaker
    seg_numbers = rng.permutation(n_seg)
    models = [f"mdl{s:04d}" for s in range(S)]
    seg_owner, seg_names = [], []
    for s in range(S):
        for j in range(spec.sessions_per_speaker):
            seg_owner.append(s)
            seg_names.append(f"seg{seg_numbers[s * spec.sessions_per_speaker + j]:05d}")

    enroll_vectors = y_audio + spec.audio.sample(rng, "W", S)
    test_vectors = y_audio[seg_owner] + spec.audio.sample(rng, "W", n_seg)

    # face videos
    face_ids, face_rows = [], []
    enroll_detections, enroll_boxes, test_detections = [], [], []

    def add_face(video, frame, k, identity, session_offset):
        ref = f"{video}/{frame}/{k}"
        vec = identity + session_offset + spec.face_frame_jitter * rng.standard_normal(d)
        face_ids.append(ref)
        face_rows.append(vec)
        return ref

    for s in range(S):
        video = models[s]
        offset = spec.face.sample(rng, "W", 1)[0]
        given = sorted(
            rng.choice(spec.enroll_video_frames, size=spec.given_frames, replace=False).tolist()
        )
        anchor = BoundingBox(*np.round(rng.uniform([40, 30, 60, 60], [200, 120, 120, 120])))
        for g in given:
            enroll_boxes.append((video, g, _jitter_box(rng, anchor, 2)))
        # detections around the given frames, wider than the selection radius
        frames = select_enroll_frames(given, spec.enroll_video_frames, radius=4)
        selected = set(select_enroll_frames(given, spec.enroll_video_frames))
        for frame in frames:
            box = _jitter_box(rng, anchor, 3)
            ref = add_face(video, frame, 0, y_face[s], offset)
            enroll_detections.append((video, frame, box, ref))
            other = int(rng.integers(S))
            if frame in selected and other != s:
                far = BoundingBox(anchor.x + anchor.w + 50, anchor.y, anchor.w, anchor.h)
                ref = add_face(video, frame, 1, y_face[other], spec.face.sample(rng, "W", 1)[0])
                enroll_detections.append((video, frame, far, ref))

    for idx in range(n_seg):
        s = seg_owner[idx]
        video = seg_names[idx]
        offset = spec.face.sample(rng, "W", 1)[0]
        duration = float(rng.uniform(*spec.test_duration))
        anchor = BoundingBox(*np.round(rng.uniform([40, 30, 60, 60], [200, 120, 120, 120])))
        for ts in sample_test_frames(duration):
            frame = int(round(ts * spec.fps))
            ref = add_face(video, frame, 0, y_face[s], offset)
            test_detections.append((video, frame, _jitter_box(rng, anchor, 3), ref))
            if rng.random() < spec.distractor_rate:
                other = int(rng.integers(S))
                if other != s:
                    far = BoundingBox(anchor.x + anchor.w + 50, anchor.y, anchor.w, anchor.h)
                    ref = add_face(video, frame, 1, y_face[other], spec.face.sample(rng, "W", 1)[0])
                    test_detections.append((video, frame, far, ref))

    # dev / eval partitions by speaker
    partitions = {}
    half = S // 2
    for name, speakers in (("dev", range(0, half)), ("eval", range(half, 2 * half))):
        part_models = [models[s] for s in speakers]
        segs_by_model = {
            models[s]: [seg_names[i] for i in range(n_seg) if seg_owner[i] == s] for s in speakers
        }
        target_pool = [(m, seg) for m in part_models for seg in segs_by_model[m]]
        pick = np.sort(rng.choice(len(target_pool), size=spec.n_targets, replace=False))
        targets = [target_pool[i] for i in pick]
        nontargets = _sample_nontargets(rng, part_models, segs_by_model, spec.n_nontargets)
        trials = targets + nontargets
        labels = [True] * len(targets) + [False] * len(nontargets)
        order = rng.permutation(len(trials))
        partitions[name] = Partition(
            models=part_models,
            segments=[s for m in part_models for s in segs_by_model[m]],
            trials=[trials[i] for i in order],
            labels=[labels[i] for i in order],
        )

    return SynthData(
        train_ids=train_ids,
        train_labels=train_labels,
        train_vectors=train_vectors,
        enroll_ids=models,
        enroll_vectors=enroll_vectors,
        test_ids=seg_names,
        test_vectors=test_vectors,
        face_ids=face_ids,
        face_vectors=np.vstack(face_rows),
        enroll_detections=enroll_detections,
        enroll_boxes=enroll_boxes,
        test_detections=test_detections,
        partitions=partitions,
    )


def default_pipeline_config(seed: int) -> dict:
    """Pipeline config matching the files written by ``write_synth``."""
    face_common = {
        "type": "face",
        "enroll_detections": "face_enroll.tsv",
        "enroll_boxes": "face_enroll_boxes.tsv",
        "test_detections": "face_test.tsv",
        "embeddings": "faces.aveb",
        "iou_threshold": 0.5,
    }
    return {
        "seed": seed,
        "output_dir": "run",
        "prior": 0.05,
        "dcf": {"p_target": 0.05, "c_miss": 1.0, "c_fa": 1.0},
        "dev": {"trials": "dev.trials", "key": "dev.key"},
        "eval": {"trials": "eval.trials", "key": "eval.key"},
        "systems": [
            {
                "name": "audio",
                "type": "embeddings",
                "train": "audio_train.aveb",
                "train_labels": "audio_train.labels",
                "enroll": "audio_enroll.aveb",
                "test": "audio_test.aveb",
                "lda_dim": 150,
                "em_iters": 10,
            },
            {"name": "face_top10", **face_common, "mode": "top_k", "k": 10},
            {"name": "face_top20pct", **face_common, "mode": "top_percent", "p": 0.2},
        ],
        "fusion": ["audio", "face_top10", "face_top20pct"],
    }


def write_synth(data: SynthData, out_dir, seed: int) -> dict:
    """Write every synthetic artifact plus ``pipeline.yaml``; returns the paths."""
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_embeddings(out / "audio_train.aveb", data.train_ids, data.train_vectors)
    io.save_labels(out / "audio_train.labels", dict(zip(data.train_ids, data.train_labels)))
    io.save_embeddings(out / "audio_enroll.aveb", data.enroll_ids, data.enroll_vectors)
    io.save_embeddings(out / "audio_test.aveb", data.test_ids, data.test_vectors)
    io.save_embeddings(out / "faces.aveb", data.face_ids, data.face_vectors)
    io.save_detections(out / "face_enroll.tsv", data.enroll_detections)
    io.save_boxes(out / "face_enroll_boxes.tsv", data.enroll_boxes)
    io.save_detections(out / "face_test.tsv", data.test_detections)
    from .calibration import TrialKey

    for name, part in data.partitions.items():
        io.save_trials(out / f"{name}.trials", part.trials)
        io.save_key(out / f"{name}.key", TrialKey(dict(zip(part.trials, part.labels))))
    config_path = out / "pipeline.yaml"
    with open(config_path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(default_pipeline_config(seed), fh, sort_keys=False)
    return {"dir": str(out), "config": str(config_path)}


# --------------------------------------------------------------------------
# toy embedder and tone corpus (stand-ins for the neural extractor)


def _projection(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    return make_rng(seed).standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def toy_embedder(features: FeatureMatrix, seed: int = 0, dim: int = 512) -> np.ndarray:
    """Fixed random projection of per-coefficient mean and std, length-normalized.

    Columns are sorted before the statistics are taken, so the result does not
    depend on frame order even at the bit level.
    """
    X = features.frames
    if X.shape[0] == 0:
        raise ContractError("toy embedder needs at least one frame")
    X = np.sort(X, axis=0)
    stats = np.concatenate([X.mean(axis=0), X.std(axis=0)])
    v = _projection(seed, stats.shape[0], dim) @ stats
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ContractError("toy embedding collapsed to zero")
    return v / norm


def tone_speaker(rng) -> dict:
    """Random 'voice': two syllable spectra built from harmonic sets."""
    f0 = rng.uniform(90, 260, size=2)
    tilt = rng.uniform(0.3, 1.2)
    return {"f0": f0, "tilt": tilt}


def tone_utterance(rng, voice: dict, rate: int = 16000, seconds: float = 3.0) -> AudioBuffer:
    """Alternating voiced syllables and short pauses; lead/trail silence included."""
    n = int(seconds * rate)
    out = np.zeros(n)
    pos = int(0.3 * rate)
    k = 0
    while pos < n - int(0.3 * rate):
        length = int(rng.uniform(0.15, 0.35) * rate)
        length = min(length, n - int(0.3 * rate) - pos)
        t = np.arange(length) / rate
        f0 = voice["f0"][k % 2] * (1 + 0.02 * rng.standard_normal())
        harmonics = np.arange(1, int(0.45 * rate / f0))
        amps = harmonics ** (-voice["tilt"])
        phases = rng.uniform(0, 2 * np.pi, harmonics.shape[0])
        syllable = np.sin(2 * np.pi * f0 * np.outer(t, harmonics) + phases) @ amps
        syllable *= np.hanning(length) * 0.3 / max(amps.sum(), 1e-9) * 3
        out[pos : pos + length] += syllable
        pos += length + int(rng.uniform(0.05, 0.2) * rate)
        k += 1
    out += 1e-4 * rng.standard_normal(n)
    return AudioBuffer(out, rate)
