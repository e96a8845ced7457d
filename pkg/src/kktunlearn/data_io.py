"""Datasets, IDX parsing and the text formats used for checkpoints, candidates and reports."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffnet import NetworkSpec, DimensionError


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class MalformedFieldError(CheckpointError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Samples in ``[0, 1]`` with labels that are either +-1 or class indices."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int = 2
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        X = np.asarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise DimensionError(f"samples must be a matrix, got shape {X.shape}")
        if X.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if y.shape != (X.shape[0],):
            raise DimensionError(f"{y.shape} labels for {X.shape[0]} samples")
        if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
            raise ValueError("sample values must lie in [0, 1]")
        if self.shape is not None and self.shape[0] * self.shape[1] != X.shape[1]:
            raise DimensionError(f"image shape {self.shape} does not hold {X.shape[1]} values")
        if self.is_signed(y):
            if self.num_classes != 2:
                raise ValueError("+-1 labels require num_classes == 2")
        elif y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "labels", y)

    @staticmethod
    def is_signed(y) -> bool:
        return bool(np.all((y == 1) | (y == -1))) and bool(np.any(y == -1))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(list(indices), dtype=int)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.num_classes, self.shape)

    def images(self) -> np.ndarray:
        if self.shape is None:
            raise ValueError("dataset has no image shape")
        return self.samples.reshape(self.n, *self.shape)

    def check_against(self, spec: NetworkSpec):
        if self.d != spec.input_dim:
            raise DimensionError(f"dataset has {self.d} features, network expects {spec.input_dim}")
        if spec.is_binary:
            if not np.all(np.abs(self.labels) == 1):
                raise ValueError("a single-output network needs +-1 labels")
        elif self.num_classes != spec.output_dim:
            raise ValueError(f"{self.num_classes} classes but {spec.output_dim} outputs")


# IDX

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: file too short for the IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    body = raw[header:]
    if len(body) < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(body)}")
    if len(body) > size:
        raise IdxError(f"{path}: {len(body) - size} trailing bytes after the data")
    return dims, np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzip-compressed) into a dataset."""
    dims, imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    (nl,), labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if dims[0] != nl:
        raise CountMismatchError(f"{dims[0]} images but {nl} labels")
    X = imgs.reshape(dims[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return LabeledDataset(X, y, num_classes=int(y.max()) + 1, shape=(dims[1], dims[2]))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress=None):
    """Write uint8 images ``(n, h, w)`` and labels; gzip when the path ends in .gz."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    blobs = [
        (images_path, struct.pack(">I3I", IMAGE_MAGIC, *images.shape) + images.tobytes()),
        (labels_path, struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()),
    ]
    for path, blob in blobs:
        zipped = compress if compress is not None else str(path).endswith(".gz")
        if zipped:
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def downsample(images: np.ndarray, side: int) -> np.ndarray:
    """Area-mean downsampling of square images ``(n, s, s)`` to ``(n, side, side)``."""
    n, h, w = images.shape
    if h != w or h % side:
        raise ValueError(f"cannot area-downsample {h}x{w} images to {side}x{side}")
    f = h // side
    return images.reshape(n, side, f, side, f).mean(axis=(2, 4))


def make_binary_subset(ds: LabeledDataset, class_a: int, class_b: int, n_per_class: int, seed: int,
                       downsample_to: int | None = None) -> LabeledDataset:
    """Balanced two-class subset with labels +1 for ``class_a`` and -1 for ``class_b``."""
    if class_a == class_b:
        raise ValueError("the two classes must differ")
    rng = np.random.default_rng(seed)
    picks = []
    for cls in (class_a, class_b):
        pool = np.flatnonzero(ds.labels == cls)
        if pool.size < n_per_class:
            raise ValueError(f"class {cls} has {pool.size} samples, {n_per_class} requested")
        picks.append(rng.choice(pool, size=n_per_class, replace=False))
    idx = np.concatenate(picks)
    X = ds.samples[idx]
    shape = ds.shape
    if downsample_to is not None:
        if shape is None:
            raise ValueError("downsampling needs an image shape")
        X = downsample(X.reshape(-1, *shape), downsample_to).reshape(len(idx), -1)
        shape = (downsample_to, downsample_to)
    y = np.concatenate([np.ones(n_per_class, dtype=np.int64), -np.ones(n_per_class, dtype=np.int64)])
    return LabeledDataset(X, y, num_classes=2, shape=shape)


# Text containers. Floats are stored as float.hex() so round trips are exact.

CHECKPOINT_VERSION = 1


def _hex(values) -> str:
    return " ".join(float(v).hex() for v in np.asarray(values, dtype=np.float64).ravel())


def _unhex(text: str, key: str) -> np.ndarray:
    try:
        return np.array([float.fromhex(t) for t in text.split()], dtype=np.float64)
    except ValueError as e:
        raise MalformedFieldError(f"field {key!r}: {e}") from None


@dataclass
class Checkpoint:
    spec: NetworkSpec
    theta: np.ndarray
    provenance: dict[str, str] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def __eq__(self, other):
        return (
            isinstance(other, Checkpoint)
            and self.spec == other.spec
            and self.format_version == other.format_version
            and self.provenance == other.provenance
            and np.array_equal(self.theta.view(np.uint64), other.theta.view(np.uint64))
        )

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.theta).tobytes()).hexdigest()[:16]


def _clean(value: str) -> str:
    return str(value).replace("\n", " ").strip()


def save_checkpoint(ckpt: Checkpoint, path):
    theta = np.asarray(ckpt.theta, dtype=np.float64)
    if theta.size != ckpt.spec.num_params:
        raise LengthMismatchError(f"theta has {theta.size} entries, spec needs {ckpt.spec.num_params}")
    spec = ckpt.spec
    lines = [
        f"format_version = {ckpt.format_version}",
        f"input_dim = {spec.input_dim}",
        f"hidden_widths = {' '.join(str(w) for w in spec.hidden_widths)}",
        f"output_dim = {spec.output_dim}",
        f"input_offset = {'none' if spec.input_offset is None else _hex(spec.input_offset)}",
    ]
    lines += [f"provenance.{k} = {_clean(v)}" for k, v in sorted(ckpt.provenance.items())]
    lines += [f"theta_length = {theta.size}", f"theta = {_hex(theta)}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fields(text: str, path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            key, sep, value = line.partition(" =")
        if not sep or not key:
            raise MalformedFieldError(f"{path}:{lineno}: expected 'key = value'")
        if key in out:
            raise MalformedFieldError(f"{path}:{lineno}: duplicate field {key!r}")
        out[key] = value.strip()
    return out


def _int_field(fields, key) -> int:
    if key not in fields:
        raise MalformedFieldError(f"missing field {key!r}")
    try:
        return int(fields[key])
    except ValueError:
        raise MalformedFieldError(f"field {key!r} is not an integer: {fields[key]!r}") from None


def load_checkpoint(path) -> Checkpoint:
    fields = _fields(Path(path).read_text(encoding="utf-8"), path)
    version = _int_field(fields, "format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported format_version {version}")
    try:
        hidden = tuple(int(w) for w in fields.get("hidden_widths", "").split())
    except ValueError:
        raise MalformedFieldError("field 'hidden_widths' must hold integers") from None
    offset_text = fields.get("input_offset", "none")
    offset = None if offset_text == "none" else tuple(_unhex(offset_text, "input_offset"))
    try:
        spec = NetworkSpec(_int_field(fields, "input_dim"), hidden, _int_field(fields, "output_dim"), offset)
    except ValueError as e:
        raise MalformedFieldError(f"{path}: invalid network description: {e}") from None
    declared = _int_field(fields, "theta_length")
    theta = _unhex(fields.get("theta", ""), "theta")
    if declared != spec.num_params or theta.size != declared:
        raise LengthMismatchError(
            f"{path}: theta has {theta.size} values, declared {declared}, spec needs {spec.num_params}"
        )
    prov = {k[len("provenance."):]: v for k, v in fields.items() if k.startswith("provenance.")}
    return Checkpoint(spec, theta, prov, version)


def save_candidates(path, X: np.ndarray, lam: np.ndarray, labels, shape=None):
    """One line per candidate: label, lambda, then the pixel values, all exact."""
    X = np.asarray(X, dtype=np.float64)
    head = f"# candidates m={X.shape[0]} d={X.shape[1]}"
    if shape is not None:
        head += f" shape={shape[0]}x{shape[1]}"
    lines = [head]
    for x, l, y in zip(X, np.asarray(lam, dtype=np.float64), labels):
        lines.append(f"{int(y)} {float(l).hex()} {_hex(x)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_candidates(path):
    """Inverse of :func:`save_candidates`; returns ``(X, lam, labels, shape)``."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# candidates"):
        raise MalformedFieldError(f"{path}: missing candidates header")
    meta = dict(tok.split("=") for tok in text[0].split()[2:])
    m, d = int(meta["m"]), int(meta["d"])
    shape = tuple(int(s) for s in meta["shape"].split("x")) if "shape" in meta else None
    rows = [line.split() for line in text[1:] if line.strip()]
    if len(rows) != m or any(len(r) != d + 2 for r in rows):
        raise LengthMismatchError(f"{path}: expected {m} rows of {d + 2} fields")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    lam = np.array([float.fromhex(r[1]) for r in rows])
    X = np.array([[float.fromhex(t) for t in r[2:]] for r in rows]).reshape(m, d)
    return X, lam, labels, shape


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def save_trajectory(path, breakdowns):
    write_csv(
        path,
        ["step", "phase", "l_stationary", "l_lambda", "l_prior", "total"],
        [(i, b.phase, b.l_stationary, b.l_lambda, b.l_prior, b.total) for i, b in enumerate(breakdowns)],
    )


REPORT_HEADER = ["query_id", "set", "ssim_pre", "ssim_post", "D_i", "boundary_distance", "decision"]


def export_report(report, path):
    """Write one CSV row per query of a verification report."""
    rows = []
    for q in report.queries:
        rows.append([q.query_id, "forget" if q.forgotten else "retain", q.ssim_pre, q.ssim_post, q.distance,
                     q.boundary_distance if q.boundary_distance is not None else "", q.decision])
    try:
        write_csv(path, REPORT_HEADER, rows)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e


def read_report(path) -> list[dict]:
    rows = read_csv(path)
    out = []
    for r in rows:
        out.append({
            "query_id": int(r["query_id"]),
            "set": r["set"],
            "ssim_pre": float(r["ssim_pre"]),
            "ssim_post": float(r["ssim_post"]),
            "D_i": float(r["D_i"]),
            "boundary_distance": float(r["boundary_distance"]) if r["boundary_distance"] else None,
            "decision": r["decision"],
        })
    return out
