"""Persistence: feature files, manifests, synthetic corpora and checkpoints.

Feature file layout (all little-endian)::

    magic   4 bytes  b"ESSF"
    version u16      1
    rank    u16      2 (text, T' x D') or 3 (speech, L x T x D)
    dims    rank x u32
    payload float32 x prod(dims), row-major

Checkpoint layout (little-endian)::

    magic       4 bytes  b"RACK"
    version     u16      1
    header_len  u32
    header      UTF-8 JSON (sorted keys): hyperparameters, stage, seed, config,
                tensor table, optimizer step, payload_bytes, payload_sha256
    payload     float64 tensors back to back in tensor-table order
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from . import gradcore as gc
from .errors import (ConfigurationError, CorruptionError, DataError, FormatError,
                     ManifestError, MigrationError)
from .model import ClapModel, LayerStack, TeacherSnapshot, TextFeature, snapshot_teacher

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"ESSF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"RACK"
CHECKPOINT_VERSION = 1
MANIFEST_FIELDS = ("id", "dataset_tag", "speech_feature_path", "text_feature_path", "caption")


# --------------------------------------------------------------------------
# feature files


def write_feature_file(path: str | os.PathLike, data) -> None:
    arr = np.asarray(data.data if isinstance(data, (LayerStack, TextFeature)) else data)
    if arr.ndim not in (2, 3) or min(arr.shape) < 1:
        raise FormatError(f"feature arrays must be rank 2 or 3 with positive dims, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to write non-finite feature values")
    header = struct.pack("<4sHH", FEATURE_MAGIC, FEATURE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path: str | os.PathLike) -> LayerStack | TextFeature:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorruptionError(f"{path}: file too short for a feature header ({len(raw)} bytes)")
    magic, version, rank = struct.unpack_from("<4sHH", raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if rank not in (2, 3):
        raise FormatError(f"{path}: rank must be 2 or 3, got {rank}")
    head = 8 + 4 * rank
    if len(raw) < head:
        raise CorruptionError(f"{path}: header truncated")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if min(dims) < 1:
        raise FormatError(f"{path}: dims must be positive, got {dims}")
    expected = 4 * math.prod(dims)
    actual = len(raw) - head
    if actual != expected:
        raise CorruptionError(f"{path}: payload should be {expected} bytes, found {actual}")
    values = np.frombuffer(raw, dtype="<f4", offset=head).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"{path}: non-finite value at flat index {int(bad[0])}")
    values = values.reshape(dims)
    return LayerStack(values) if rank == 3 else TextFeature(values)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    dataset_tag: str
    speech_feature_path: str
    text_feature_path: str
    caption: str

    def to_line(self) -> str:
        return "\t".join(getattr(self, f) for f in MANIFEST_FIELDS) + "\n"


@dataclass
class Manifest:
    path: Path
    entries: dict[str, ManifestEntry]
    groups: dict[str, list[str]]
    missing: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.path.parent / p


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Parse ``id<TAB>tag<TAB>speech<TAB>text<TAB>caption`` lines.

    Entries are keyed and grouped in sorted-id order, so line order never
    matters. Extra columns produce a warning; missing feature files are
    listed in ``missing`` rather than raised.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    seen: dict[str, tuple[int, ManifestEntry]] = {}
    warnings: list[str] = []
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) < len(MANIFEST_FIELDS):
            raise ManifestError(
                f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} tab-separated fields, "
                f"found {len(fields)}"
            )
        if len(fields) > len(MANIFEST_FIELDS):
            msg = f"{path}:{lineno}: ignoring {len(fields) - len(MANIFEST_FIELDS)} unknown field(s)"
            log.warning(msg)
            warnings.append(msg)
        entry = ManifestEntry(*fields[: len(MANIFEST_FIELDS)])
        if not entry.id:
            raise ManifestError(f"{path}:{lineno}: empty id")
        if entry.id in seen:
            raise ManifestError(
                f"{path}: duplicate id {entry.id!r} on lines {seen[entry.id][0]} and {lineno}"
            )
        seen[entry.id] = (lineno, entry)

    entries = {k: seen[k][1] for k in sorted(seen)}
    groups: dict[str, list[str]] = {}
    for k, e in entries.items():
        groups.setdefault(e.dataset_tag, []).append(k)
    manifest = Manifest(path, entries, dict(sorted(groups.items())), warnings=warnings)
    for k, e in entries.items():
        for rel in (e.speech_feature_path, e.text_feature_path):
            if not manifest.resolve(rel).is_file():
                manifest.missing.append((k, rel))
    return manifest


def write_manifest(path: str | os.PathLike, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            for f in MANIFEST_FIELDS:
                if any(c in getattr(e, f) for c in "\t\n"):
                    raise ManifestError(f"{e.id}: field {f} contains a tab or newline")
            fh.write(e.to_line())


@dataclass
class PairedFeatures:
    """Pooled, in-memory view of a manifest.

    ``speech`` holds per-layer frame means (N, L, D) and ``text`` the token
    means (N, D'); nothing downstream needs the unpooled frames.
    """

    ids: list[str]
    tags: list[str]
    captions: list[str]
    speech: np.ndarray
    text: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_layers(self) -> int:
        return self.speech.shape[1]

    @property
    def speech_dim(self) -> int:
        return self.speech.shape[2]

    @property
    def text_dim(self) -> int:
        return self.text.shape[1]

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, t in enumerate(self.tags):
            out.setdefault(t, []).append(i)
        return dict(sorted(out.items()))

    def subset(self, indices) -> "PairedFeatures":
        idx = list(indices)
        return PairedFeatures([self.ids[i] for i in idx], [self.tags[i] for i in idx],
                              [self.captions[i] for i in idx], self.speech[idx], self.text[idx])

    def with_tags(self, tags: Iterable[str]) -> "PairedFeatures":
        keep = set(tags)
        return self.subset(i for i, t in enumerate(self.tags) if t in keep)

    @classmethod
    def concat(cls, parts: list["PairedFeatures"]) -> "PairedFeatures":
        return cls(sum((p.ids for p in parts), []), sum((p.tags for p in parts), []),
                   sum((p.captions for p in parts), []),
                   np.concatenate([p.speech for p in parts]),
                   np.concatenate([p.text for p in parts]))


def load_features(manifest: Manifest | str | os.PathLike,
                  tags: Iterable[str] | None = None) -> PairedFeatures:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if manifest.missing:
        first_id, first_path = manifest.missing[0]
        raise DataError(
            f"{len(manifest.missing)} missing feature file(s), first: {first_path} ({first_id})"
        )
    wanted = None if tags is None else set(tags)
    ids, tag_list, captions, speech, text = [], [], [], [], []
    for k, e in manifest.entries.items():
        if wanted is not None and e.dataset_tag not in wanted:
            continue
        stack = read_feature_file(manifest.resolve(e.speech_feature_path))
        feat = read_feature_file(manifest.resolve(e.text_feature_path))
        if not isinstance(stack, LayerStack):
            raise DataError(f"{k}: speech feature file must be rank 3")
        if not isinstance(feat, TextFeature):
            raise DataError(f"{k}: text feature file must be rank 2")
        ids.append(k)
        tag_list.append(e.dataset_tag)
        captions.append(e.caption)
        speech.append(stack.frame_means())
        text.append(feat.pooled())
    if not ids:
        raise DataError(f"{manifest.path}: no entries selected")
    shapes = {s.shape for s in speech}
    if len(shapes) != 1:
        raise DataError(f"speech stacks disagree on (L, D): {sorted(shapes)}")
    dims = {t.shape for t in text}
    if len(dims) != 1:
        raise DataError(f"text features disagree on D': {sorted(dims)}")
    return PairedFeatures(ids, tag_list, captions, np.stack(speech), np.stack(text))


# --------------------------------------------------------------------------
# synthetic corpora

DEFAULT_TAGS = ("PS", "TS", "SC")


@dataclass
class SyntheticSpec:
    num_pairs: int = 32
    num_tags: int = 1
    num_layers: int = 3
    num_frames: int = 5
    speech_dim: int = 16
    text_dim: int = 16
    num_tokens: int = 4
    latent_dim: int = 16
    cluster_separation: float = 5.0
    noise: float = 1.0
    # how far each tag's caption generator departs from the shared one
    tag_shift: float = 1.0
    eval_fraction: float = 0.0
    seed: int = 0
    tags: tuple[str, ...] | None = None

    def __post_init__(self):
        for name in ("num_pairs", "num_tags", "num_layers", "num_frames", "speech_dim",
                     "text_dim", "num_tokens", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.cluster_separation < 0 or self.noise < 0 or self.tag_shift < 0:
            raise ConfigurationError("separation, noise and tag_shift must be >= 0")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigurationError("eval_fraction must lie in [0, 1)")
        if self.tags is not None:
            self.tags = tuple(self.tags)
            if len(self.tags) != self.num_tags or len(set(self.tags)) != self.num_tags:
                raise ConfigurationError("tags must list num_tags distinct names")

    def tag_names(self) -> tuple[str, ...]:
        if self.tags is not None:
            return self.tags
        if self.num_tags <= len(DEFAULT_TAGS):
            return DEFAULT_TAGS[: self.num_tags]
        return tuple(f"D{k}" for k in range(self.num_tags))


@dataclass
class SyntheticCorpus:
    root: Path
    manifest: Path
    train_manifest: Path
    eval_manifest: Path | None


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> SyntheticCorpus:
    """Write paired features that are noisy views of a shared latent per pair.

    Speech layer ``l`` frames are ``sep * A_l u + noise``; caption tokens are
    ``sep * B_tag u + noise`` where ``B_tag`` mixes a shared matrix with a
    tag-specific one. With ``cluster_separation = 0`` the two modalities are
    independent noise.
    """
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    speech_mix = rng.standard_normal((spec.num_layers, spec.speech_dim, k)) / np.sqrt(k)
    text_base = rng.standard_normal((spec.text_dim, k)) / np.sqrt(k)
    tags = spec.tag_names()
    text_mix = {}
    for tag in tags:
        own = rng.standard_normal((spec.text_dim, k)) / np.sqrt(k)
        text_mix[tag] = (text_base + spec.tag_shift * own) / np.sqrt(1.0 + spec.tag_shift ** 2)

    per_tag = [spec.num_pairs // spec.num_tags + (1 if t < spec.num_pairs % spec.num_tags else 0)
               for t in range(spec.num_tags)]
    train, held_out = [], []
    for tag, count in zip(tags, per_tag):
        n_eval = int(math.ceil(spec.eval_fraction * count)) if spec.eval_fraction > 0 else 0
        for i in range(count):
            u = rng.standard_normal(k)
            frames = (spec.cluster_separation * np.einsum("ldk,k->ld", speech_mix, u)[:, None, :]
                      + spec.noise * rng.standard_normal(
                          (spec.num_layers, spec.num_frames, spec.speech_dim)))
            tokens = (spec.cluster_separation * (text_mix[tag] @ u)[None, :]
                      + spec.noise * rng.standard_normal((spec.num_tokens, spec.text_dim)))
            sid = f"{tag}_{i:05d}"
            speech_rel = f"features/{sid}.speech.essf"
            text_rel = f"features/{sid}.text.essf"
            write_feature_file(root / speech_rel, frames)
            write_feature_file(root / text_rel, tokens)
            entry = ManifestEntry(sid, tag, speech_rel, text_rel,
                                  f"{tag} speaking style description {i:05d}")
            (held_out if i >= count - n_eval else train).append(entry)

    write_manifest(root / "manifest.tsv", sorted(train + held_out, key=lambda e: e.id))
    write_manifest(root / "train.tsv", train)
    eval_path = None
    if held_out:
        eval_path = root / "eval.tsv"
        write_manifest(eval_path, held_out)
    return SyntheticCorpus(root, root / "manifest.tsv", root / "train.tsv", eval_path)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    hyperparameters: dict
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    stage: str
    seed: int
    config: dict
    optimizer: dict | None = None
    format_version: int = CHECKPOINT_VERSION

    def to_model(self) -> ClapModel:
        model = ClapModel.from_hyperparameters(self.hyperparameters)
        model.load_state(self.params)
        return model

    def to_teacher(self) -> TeacherSnapshot:
        return snapshot_teacher(self.to_model())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ClapModel | TeacherSnapshot, path: str | os.PathLike, *,
                    stage: str = "pretrain", seed: int = 0, config: dict | None = None,
                    optimizer=None) -> None:
    """Write ``model`` (and optionally Adam state with ``t``, ``m``, ``v``) atomically."""
    if stage not in ("pretrain", "distill"):
        raise ConfigurationError(f"unknown stage {stage!r}")
    tensors: list[tuple[str, np.ndarray]] = [(p.name, p.value) for p in model.parameters()]
    opt_header = None
    if optimizer is not None:
        opt_header = {"t": int(optimizer.t)}
        for name in sorted(optimizer.m):
            tensors.append((f"optimizer.m/{name}", optimizer.m[name]))
            tensors.append((f"optimizer.v/{name}", optimizer.v[name]))
    table, chunks, offset = [], [], 0
    for name, value in tensors:
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparameters": model.hyperparameters(),
        "stage": stage,
        "seed": int(seed),
        "config": config or {},
        "trainable": {p.name: bool(p.trainable) for p in model.parameters()},
        "tensors": table,
        "optimizer": opt_header,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    _atomic_write(Path(path), prefix + header_bytes + payload)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise CorruptionError(f"{path}: too short for a checkpoint header")
    magic, version, header_len = struct.unpack_from("<4sHI", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise MigrationError(
            f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    start = 10
    if len(raw) < start + header_len:
        raise CorruptionError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    payload = raw[start + header_len:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptionError(
            f"{path}: payload should be {header['payload_bytes']} bytes, found {len(payload)}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptionError(f"{path}: payload hash mismatch")

    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for item in header["tensors"]:
        count = math.prod(item["shape"])
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=item["offset"])
        arr = arr.astype(np.float64).reshape(item["shape"])
        name = item["name"]
        if name.startswith("optimizer.m/"):
            opt_m[name.split("/", 1)[1]] = arr
        elif name.startswith("optimizer.v/"):
            opt_v[name.split("/", 1)[1]] = arr
        else:
            params[name] = arr
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {"t": header["optimizer"]["t"], "m": opt_m, "v": opt_v}
    return Checkpoint(header["hyperparameters"], params, header["trainable"], header["stage"],
                      header["seed"], header["config"], optimizer, header["format_version"])


def checkpoint_summary(ckpt: Checkpoint) -> dict:
    model = ckpt.to_model()
    return {
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "hyperparameters": ckpt.hyperparameters,
        "layer_weights": [float(a) for a in gc.softmax_rows(model.speech_layer_weights.logits.value)],
        "temperature": model.temperature,
        "has_optimizer_state": ckpt.optimizer is not None,
    }


def config_to_dict(cfg) -> dict:
    """JSON-safe dict of a dataclass config (enums by value, tuples as lists)."""
    def clean(v):
        if isinstance(v, Enum):
            return v.value
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    return clean(asdict(cfg))
