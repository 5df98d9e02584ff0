"""Persistent embedding galleries for enrolment and 1:1 verification.

A gallery is a ``*.gallery.jsonl`` file: one header object, then one entry
per enrolled subject. Every update rewrites the file to a temporary sibling
and renames it into place, so readers only ever see a complete file. Writers
serialize on an advisory lock held on ``<gallery>.lock``.
"""
from __future__ import annotations

import contextlib
import datetime as _dt
import fcntl
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateEmbeddingError, GalleryError, ModelHashMismatch, UnknownSubject
from .imaging import GrayImage, to_tensor
from .matching import ThresholdModel, cosine_similarity, decide
from .model import ModelParams, extract_embedding

FORMAT = "veinmatch-gallery"
VERSION = 1


@dataclass(frozen=True)
class GalleryEntry:
    subject: str
    embedding: np.ndarray
    norm: float
    model_hash: str
    created: str

    def to_json(self) -> dict:
        return {"id": self.subject, "dim": int(self.embedding.size),
                "embedding": [float(v) for v in self.embedding], "norm": self.norm,
                "created": self.created}


@dataclass(frozen=True)
class VerifyResult:
    subject: str
    score: float
    alpha: float
    accepted: bool
    latency_s: float


def timestamp() -> str:
    """UTC creation time; ``SOURCE_DATE_EPOCH`` pins it for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = float(epoch) if epoch else time.time()
    return _dt.datetime.fromtimestamp(when, _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_gallery(path) -> tuple[str | None, dict[str, GalleryEntry]]:
    """Return ``(model_hash, entries)``; a missing file is an empty gallery."""
    path = Path(path)
    if not path.exists():
        return None, {}
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise GalleryError(f"{path}: empty gallery file has no header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise GalleryError(f"{path}: unreadable header ({exc.msg})") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise GalleryError(f"{path}: not a {FORMAT} v{VERSION} file")
    model_hash = header.get("model_hash")
    entries: dict[str, GalleryEntry] = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            emb = np.asarray(doc["embedding"], dtype=np.float64)
            if emb.size != int(doc["dim"]):
                raise ValueError(f"dim {doc['dim']} != {emb.size} values")
            entries[doc["id"]] = GalleryEntry(doc["id"], emb, float(doc["norm"]), model_hash,
                                              doc["created"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise GalleryError(f"{path}:{n}: malformed entry ({exc})") from exc
    return model_hash, entries


def _render(model_hash: str, entries: dict[str, GalleryEntry]) -> str:
    header = {"format": FORMAT, "version": VERSION, "model_hash": model_hash}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(e.to_json(), sort_keys=True) for e in entries.values()]
    return "\n".join(lines) + "\n"


@contextlib.contextmanager
def _writer_lock(path: Path):
    lock_path = path.with_name(path.name + ".lock")
    with open(lock_path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def embed_images(params: ModelParams, images: Sequence[GrayImage]) -> np.ndarray:
    """Mean embedding of one or more images of the same subject.

    Images are embedded one at a time, exactly as a verification probe is, so
    an entry built from copies of one image equals that image's embedding.
    """
    if not images:
        raise GalleryError("enrolment needs at least one image")
    embs = [np.asarray(extract_embedding(params, to_tensor(img)), dtype=np.float64) for img in images]
    return np.mean(embs, axis=0)


def enroll(path, subject: str, images: Sequence[GrayImage], params: ModelParams,
           replace: bool = False, created: str | None = None) -> GalleryEntry:
    if not subject:
        raise GalleryError("subject id must be non-empty")
    path = Path(path)
    emb = embed_images(params, images)
    norm = float(np.linalg.norm(emb))
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateEmbeddingError(f"enrolment of {subject!r} produced a zero-norm embedding")
    model_hash = params.content_hash()
    entry = GalleryEntry(subject, emb, norm, model_hash, created or timestamp())
    path.parent.mkdir(parents=True, exist_ok=True)
    with _writer_lock(path):
        existing_hash, entries = read_gallery(path)
        if existing_hash is not None and existing_hash != model_hash:
            raise ModelHashMismatch(
                f"{path}: gallery was built with model {existing_hash[:12]}, not {model_hash[:12]}")
        if subject in entries and not replace:
            raise GalleryError(f"{path}: subject {subject!r} is already enrolled")
        entries[subject] = entry
        _atomic_write(path, _render(model_hash, entries))
    return entry


def lookup(path, subject: str, params: ModelParams | None = None) -> GalleryEntry:
    model_hash, entries = read_gallery(path)
    if params is not None and model_hash is not None and model_hash != params.content_hash():
        raise ModelHashMismatch(f"{path}: gallery model hash differs from the loaded model")
    if subject not in entries:
        raise UnknownSubject(f"{path}: subject {subject!r} is not enrolled")
    return entries[subject]


def verify(path, subject: str, probe: GrayImage, params: ModelParams,
           threshold: ThresholdModel | float) -> VerifyResult:
    """Score one probe against an enrolled subject and apply the strict threshold rule."""
    entry = lookup(path, subject, params)
    alpha = threshold.alpha if isinstance(threshold, ThresholdModel) else float(threshold)
    started = time.perf_counter()
    emb = extract_embedding(params, to_tensor(probe))
    score = cosine_similarity(entry.embedding, emb)
    accepted = decide(score, alpha)
    latency = time.perf_counter() - started
    return VerifyResult(subject, score, alpha, accepted, latency)
