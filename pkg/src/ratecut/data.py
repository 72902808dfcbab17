"""Feature-file ingestion, synthetic dataset generation, and config parsing.

The cgf binary format (little-endian):
    magic   4 bytes  b"CGF1"
    N       u32      number of points
    D       u32      feature dimension
    labels  u8       1 if an i32 label block follows the features
    data    f32      N * D features, row-major
    labels  i32      N labels (only if the flag is set)

Features are stored as 32-bit floats on disk and promoted to float64 in
memory. The CSV flavor has a header row, one point per line, and an
optional final ``label`` column.
"""

import csv as csv_mod
import struct
from dataclasses import dataclass, field

import numpy as np

CGF_MAGIC = b"CGF1"


class FormatError(ValueError):
    """Malformed feature file."""


class ConfigError(ValueError):
    """Malformed or incomplete config file."""


@dataclass
class FeatureMatrix:
    """N pre-feature vectors of dimension D, with optional ground-truth labels."""

    features: np.ndarray  # n x D float64
    labels: np.ndarray | None = None
    split: str = "all"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN/Inf entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match "
                    f"{self.features.shape[0]} points")
        if self.split not in ("train", "test", "all"):
            raise ValueError(f"unknown split tag {self.split!r}")

    @property
    def n_points(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class SyntheticSpec:
    """Recipe for a desk-scale surrogate of encoder features."""

    kind: str  # orthogonal_subspaces | gaussian_blobs
    k: int
    ambient_dim: int
    points_per_cluster: int
    subspace_dim: int = 3
    blob_sigma: float = 0.1
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("orthogonal_subspaces", "gaussian_blobs"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.k < 1 or self.ambient_dim < 1 or self.points_per_cluster < 1:
            raise ValueError("k, ambient_dim and points_per_cluster must be positive")
        if self.kind == "orthogonal_subspaces":
            if self.subspace_dim < 1:
                raise ValueError("subspace_dim must be positive")
            if self.subspace_dim * self.k > self.ambient_dim:
                raise ValueError(
                    f"need subspace_dim * k <= ambient_dim, got "
                    f"{self.subspace_dim} * {self.k} > {self.ambient_dim}")
        if self.kind == "gaussian_blobs" and self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


# -- cgf binary ------------------------------------------------------------

def save_cgf(fm: FeatureMatrix, path):
    has_labels = fm.labels is not None
    with open(path, "wb") as fh:
        fh.write(CGF_MAGIC)
        fh.write(struct.pack("<IIB", fm.n_points, fm.dim, 1 if has_labels else 0))
        fh.write(np.ascontiguousarray(fm.features, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(fm.labels, dtype="<i4").tobytes())


def load_cgf(path, split="all") -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short for magic at byte 0 ({len(blob)} bytes)")
    if blob[:4] != CGF_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    n, d, has_labels = struct.unpack("<IIB", blob[4:13])
    if n == 0:
        raise FormatError(f"{path}: empty dataset (N = 0 in header)")
    if d == 0:
        raise FormatError(f"{path}: zero feature dimension in header")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: invalid label flag {has_labels} at byte 12")
    offset = 13
    feat_bytes = n * d * 4
    if len(blob) < offset + feat_bytes:
        raise FormatError(f"{path}: truncated feature block at byte {len(blob)}")
    feats = np.frombuffer(blob[offset:offset + feat_bytes], dtype="<f4").reshape(n, d)
    if not np.isfinite(feats).all():
        bad = int(np.flatnonzero(~np.isfinite(feats.ravel()))[0])
        raise FormatError(f"{path}: non-finite feature at byte {offset + bad * 4}")
    offset += feat_bytes
    labels = None
    if has_labels:
        if len(blob) < offset + n * 4:
            raise FormatError(f"{path}: truncated label block at byte {len(blob)}")
        labels = np.frombuffer(blob[offset:offset + n * 4], dtype="<i4").astype(np.int64)
        offset += n * 4
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at byte {offset}")
    return FeatureMatrix(features=feats.astype(np.float64), labels=labels, split=split)


# -- csv ---------------------------------------------------------------------

def save_csv(fm: FeatureMatrix, path):
    has_labels = fm.labels is not None
    feats32 = fm.features.astype(np.float32)
    with open(path, "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        header = [f"f{j}" for j in range(fm.dim)]
        if has_labels:
            header.append("label")
        writer.writerow(header)
        for i in range(fm.n_points):
            row = [f"{v:.9g}" for v in feats32[i]]
            if has_labels:
                row.append(str(int(fm.labels[i])))
            writer.writerow(row)


def load_csv(path, split="all") -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv_mod.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        has_labels = bool(header) and header[-1].strip().lower() == "label"
        dim = len(header) - (1 if has_labels else 0)
        if dim < 1:
            raise FormatError(f"{path}: header declares no feature columns (line 1)")
        feats, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            try:
                feats.append([float(v) for v in row[:dim]])
                if has_labels:
                    labels.append(int(row[dim]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {line_no}: {exc}") from None
    if not feats:
        raise FormatError(f"{path}: no data rows")
    features = np.asarray(feats, dtype=np.float64)
    if not np.isfinite(features).all():
        bad_row = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
        raise FormatError(f"{path}: non-finite feature on line {bad_row + 2}")
    return FeatureMatrix(features=features,
                         labels=np.asarray(labels, dtype=np.int64) if has_labels else None,
                         split=split)


def load_features(path, format: str | None = None, split="all") -> FeatureMatrix:
    """Load a feature file; format inferred from the extension when omitted."""
    if format is None:
        format = "csv" if str(path).endswith(".csv") else "cgf"
    if format == "cgf":
        return load_cgf(path, split=split)
    if format == "csv":
        return load_csv(path, split=split)
    raise ValueError(f"unknown feature format {format!r}")


# -- synthetic data -----------------------------------------------------------

def gen_synthetic(spec: SyntheticSpec) -> FeatureMatrix:
    """Deterministic synthetic features with ground-truth labels."""
    rng = np.random.default_rng(spec.seed)
    n_total = spec.k * spec.points_per_cluster
    labels = np.repeat(np.arange(spec.k), spec.points_per_cluster)
    if spec.kind == "orthogonal_subspaces":
        basis, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, spec.k * spec.subspace_dim)))
        feats = np.empty((n_total, spec.ambient_dim))
        for ell in range(spec.k):
            sub = basis[:, ell * spec.subspace_dim:(ell + 1) * spec.subspace_dim]
            coeffs = rng.standard_normal((spec.points_per_cluster, spec.subspace_dim))
            pts = coeffs @ sub.T
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
            feats[ell * spec.points_per_cluster:(ell + 1) * spec.points_per_cluster] = pts
        if spec.noise > 0:
            feats = feats + spec.noise * rng.standard_normal(feats.shape)
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    else:
        # Means on mutually orthogonal directions scaled so that the pairwise
        # separation sqrt(2) * scale is at least 6 sigma.
        dirs, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, spec.k)))
        scale = 6.0 * spec.blob_sigma / np.sqrt(2.0)
        means = scale * dirs.T  # k x D
        feats = np.repeat(means, spec.points_per_cluster, axis=0)
        feats = feats + spec.blob_sigma * rng.standard_normal(feats.shape)
        if spec.noise > 0:
            feats = feats + spec.noise * rng.standard_normal(feats.shape)
    return FeatureMatrix(features=feats, labels=labels)


# -- config files --------------------------------------------------------------

def parse_config_text(text) -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if key in out:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())
