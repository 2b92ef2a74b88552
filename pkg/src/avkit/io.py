"""File formats: trial lists, keys, scores, labels, detections and the AVEB container.

Text files are UTF-8 with ``\\n`` line endings and tab-separated fields.

AVEB container layout (little-endian)::

    b"AVEB" | u32 version=1 | u32 dim | u32 count
    count x ( u16 id_len | id_len bytes UTF-8 id | dim x float32 )
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .calibration import CalibrationModel, ScoreSet, TrialKey
from .errors import DataError
from .face import BoundingBox

MAGIC = b"AVEB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_IDLEN = struct.Struct("<H")

LABELS = {"target": True, "nontarget": False}


def _read_rows(path, ncols: int):
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from exc
    if text and not text.endswith("\n"):
        text += "\n"
    for lineno, line in enumerate(text.split("\n")[:-1], start=1):
        fields = line.split("\t")
        if len(fields) != ncols or any(f == "" for f in fields):
            raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {line!r}")
        yield lineno, fields


def _write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def format_score(value: float) -> str:
    return f"{value:.6f}"


def _parse_score(text: str, where: str) -> float:
    if "e" in text.lower() or text.startswith("+"):
        raise DataError(f"{where}: score {text!r} must be plain decimal notation")
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse score {text!r}") from None
    if not np.isfinite(value):
        raise DataError(f"{where}: non-finite score {text!r}")
    return value


# --------------------------------------------------------------------------
# trial lists, keys, scores


def load_trials(path) -> list:
    trials, seen = [], set()
    for lineno, (model, seg) in _read_rows(path, 2):
        if (model, seg) in seen:
            raise DataError(f"{path}:{lineno}: duplicate trial {model} {seg}")
        seen.add((model, seg))
        trials.append((model, seg))
    return trials


def save_trials(path, trials) -> None:
    _write_lines(path, (f"{m}\t{s}" for m, s in trials))


def load_key(path) -> TrialKey:
    entries = {}
    for lineno, (model, seg, label) in _read_rows(path, 3):
        if label not in LABELS:
            raise DataError(f"{path}:{lineno}: label must be 'target' or 'nontarget', got {label!r}")
        if (model, seg) in entries:
            raise DataError(f"{path}:{lineno}: duplicate trial {model} {seg}")
        entries[(model, seg)] = LABELS[label]
    if not entries:
        raise DataError(f"{path}: key is empty")
    return TrialKey(entries)


def save_key(path, key: TrialKey) -> None:
    _write_lines(
        path,
        (f"{m}\t{s}\t{'target' if lab else 'nontarget'}" for (m, s), lab in key.entries.items()),
    )


def load_scores(path, system_id: str | None = None) -> ScoreSet:
    entries = {}
    for lineno, (model, seg, score) in _read_rows(path, 3):
        if (model, seg) in entries:
            raise DataError(f"{path}:{lineno}: duplicate trial {model} {seg}")
        entries[(model, seg)] = _parse_score(score, f"{path}:{lineno}")
    return ScoreSet(system_id or Path(path).stem, entries)


def save_scores(path, scores: ScoreSet) -> None:
    _write_lines(path, (f"{m}\t{s}\t{format_score(v)}" for (m, s), v in scores.entries.items()))


def load_labels(path) -> dict:
    """``utt_id<TAB>speaker_id`` lines (utterance-to-speaker map)."""
    labels = {}
    for lineno, (utt, spk) in _read_rows(path, 2):
        if utt in labels:
            raise DataError(f"{path}:{lineno}: duplicate utterance {utt}")
        labels[utt] = spk
    return labels


def save_labels(path, labels: dict) -> None:
    _write_lines(path, (f"{u}\t{s}" for u, s in labels.items()))


# --------------------------------------------------------------------------
# AVEB embedding container


def save_embeddings(path, ids, vectors) -> None:
    ids = list(ids)
    X = np.asarray(vectors, dtype="<f4")
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, 0)
    if X.ndim != 2 or X.shape[0] != len(ids):
        raise DataError(f"{len(ids)} ids for embeddings of shape {X.shape}")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate embedding ids")
    parts = [_HEADER.pack(MAGIC, VERSION, X.shape[1], X.shape[0])]
    for uid, row in zip(ids, X):
        raw = str(uid).encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"embedding id too long: {uid[:40]}...")
        parts.append(_IDLEN.pack(len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_embeddings(path) -> tuple[list, np.ndarray]:
    """Return ``(ids, vectors)``; vectors are float32 as stored."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    row_bytes = 4 * dim
    ids, seen = [], set()
    X = np.empty((count, dim), dtype="<f4")
    for i in range(count):
        if offset + _IDLEN.size > len(blob):
            raise DataError(f"{path}: truncated at record {i} of {count}")
        (id_len,) = _IDLEN.unpack_from(blob, offset)
        offset += _IDLEN.size
        if offset + id_len + row_bytes > len(blob):
            raise DataError(f"{path}: truncated at record {i} of {count}")
        try:
            uid = blob[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}: record {i} id is not UTF-8") from exc
        offset += id_len
        if uid in seen:
            raise DataError(f"{path}: duplicate id {uid!r}")
        seen.add(uid)
        ids.append(uid)
        X[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += row_bytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after {count} records")
    return ids, X


# --------------------------------------------------------------------------
# face detections


def load_detections(path) -> list:
    """Rows of ``video_id, frame_index, x, y, w, h, embedding_ref``."""
    rows = []
    for lineno, (video, frame, x, y, w, h, ref) in _read_rows(path, 7):
        try:
            box = BoundingBox(float(x), float(y), float(w), float(h))
            rows.append((video, int(frame), box, ref))
        except (ValueError, ArithmeticError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def save_detections(path, rows) -> None:
    _write_lines(
        path,
        (
            f"{v}\t{f}\t{b.x:g}\t{b.y:g}\t{b.w:g}\t{b.h:g}\t{ref}"
            for v, f, b, ref in rows
        ),
    )


def load_boxes(path) -> list:
    """Annotated enrollment boxes: ``video_id, frame_index, x, y, w, h``."""
    rows = []
    for lineno, (video, frame, x, y, w, h) in _read_rows(path, 6):
        try:
            rows.append((video, int(frame), BoundingBox(float(x), float(y), float(w), float(h))))
        except (ValueError, ArithmeticError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def save_boxes(path, rows) -> None:
    _write_lines(path, (f"{v}\t{f}\t{b.x:g}\t{b.y:g}\t{b.w:g}\t{b.h:g}" for v, f, b in rows))


# --------------------------------------------------------------------------
# calibration model


def save_calibration(path, model: CalibrationModel) -> None:
    lines = [f"{sid}\t{w!r}" for sid, w in zip(model.system_ids, model.weights.tolist())]
    lines.append(f"__bias__\t{model.bias!r}")
    lines.append(f"__prior__\t{model.prior!r}")
    _write_lines(path, lines)


def load_calibration(path) -> CalibrationModel:
    ids, weights, bias, prior = [], [], None, None
    for lineno, (name, value) in _read_rows(path, 2):
        try:
            number = float(value)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad number {value!r}") from None
        if name == "__bias__":
            bias = number
        elif name == "__prior__":
            prior = number
        else:
            ids.append(name)
            weights.append(number)
    if bias is None or prior is None:
        raise DataError(f"{path}: missing __bias__ or __prior__ line")
    return CalibrationModel(ids, np.array(weights), bias, prior)


# --------------------------------------------------------------------------
# audio backend model (stored in an AVEB container, rows zero-padded)


def save_backend(path, backend) -> None:
    """Write LDA and PLDA parameters as named AVEB records.

    Every record is padded to the container width ``max(D, 2)``; the ``dims``
    record holds ``(D, d)``.
    """
    lda, plda = backend.lda, backend.plda
    D, d = lda.input_dim, lda.output_dim
    width = max(D, 2)

    def pad(v):
        out = np.zeros(width)
        out[: len(v)] = v
        return out

    ids, rows = ["dims", "lda.mean"], [pad([D, d]), pad(lda.mean)]
    ids += [f"lda.proj.{i}" for i in range(d)]
    rows += [pad(r) for r in lda.projection]
    ids.append("plda.mu")
    rows.append(pad(plda.mu))
    ids += [f"plda.B.{i}" for i in range(d)] + [f"plda.W.{i}" for i in range(d)]
    rows += [pad(r) for r in plda.B] + [pad(r) for r in plda.W]
    save_embeddings(path, ids, np.vstack(rows))


def load_backend(path):
    from .backend import AudioBackend, LdaTransform, PldaModel

    ids, X = load_embeddings(path)
    table = dict(zip(ids, X.astype(np.float64)))
    try:
        D, d = (int(v) for v in table["dims"][:2])
        mean = table["lda.mean"][:D]
        proj = np.vstack([table[f"lda.proj.{i}"][:D] for i in range(d)])
        mu = table["plda.mu"][:d]
        B = np.vstack([table[f"plda.B.{i}"][:d] for i in range(d)])
        W = np.vstack([table[f"plda.W.{i}"][:d] for i in range(d)])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: not a backend model ({exc})") from exc
    # float32 storage breaks exact symmetry
    B, W = 0.5 * (B + B.T), 0.5 * (W + W.T)
    return AudioBackend(LdaTransform(mean, proj), PldaModel(mu, B, W))
