"""Embedding-space near-duplicate removal.

Pipeline: 1-NN distance distribution -> threshold -> neighborhood graph with
an edge for every pair strictly below the threshold -> connected components
via union-find -> keep one representative per component (lexicographically
smallest id, for determinism).

Features are consumed from "PFF1" files; a built-in deterministic extractor
(16x16 grayscale downsample plus per-channel moments) exists so nothing here
ever needs a pretrained network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .spatial import ManifestEntry, bilinear_resize, load_image

_MAGIC = b"PFF1"

# row-block size for exact blocked pairwise distances
_BLOCK = 1024


@dataclass
class FeatureSet:
    """N x D embedding matrix with per-row sample identifiers."""

    matrix: np.ndarray
    ids: list[str]
    source: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ParameterError(f"feature matrix must be (N>=1, D), got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("feature matrix contains non-finite values")
        if len(self.ids) != self.matrix.shape[0]:
            raise ParameterError("ids length must match the number of rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("feature ids must be unique")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class DedupReport:
    threshold: float
    components: list[list[str]]
    kept: list[str]
    removed_count: int


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _block_dist2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances between row blocks, in float64."""
    a = a.astype(np.float64, copy=False)
    b = b.astype(np.float64, copy=False)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def first_neighbor_distances(fs: FeatureSet) -> np.ndarray:
    """Euclidean distance from each point to its nearest other point.

    Exact for any N; computed in float64 row blocks (no approximate index).
    """
    if fs.n < 2:
        raise ParameterError("need at least 2 points for neighbor distances")
    x = fs.matrix
    out = np.empty(fs.n, dtype=np.float64)
    for start in range(0, fs.n, _BLOCK):
        stop = min(start + _BLOCK, fs.n)
        d2 = _block_dist2(x[start:stop], x)
        for i in range(start, stop):
            d2[i - start, i] = np.inf
        out[start:stop] = np.sqrt(d2.min(axis=1))
    return out


def select_threshold(distances: np.ndarray, policy: str | tuple) -> float:
    """policy: ("percentile", p) / ("fixed", v), or "percentile:p" / "fixed:v"."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise ParameterError("empty distance list")
    if isinstance(policy, str):
        kind, _, arg = policy.partition(":")
        if not arg:
            raise ParameterError(f"policy {policy!r} needs an argument, e.g. percentile:5")
        try:
            policy = (kind, float(arg))
        except ValueError as e:
            raise ParameterError(f"bad policy argument in {policy!r}") from e
    kind, value = policy
    if kind == "fixed":
        if value < 0:
            raise ParameterError("fixed threshold must be >= 0")
        return float(value)
    if kind == "percentile":
        if not (0 <= value <= 100):
            raise ParameterError(f"percentile must be in [0, 100], got {value}")
        return float(np.percentile(distances, value))
    raise ParameterError(f"unknown threshold policy {kind!r}")


def deduplicate(fs: FeatureSet, threshold: float) -> DedupReport:
    """Connected components of the strict sub-threshold neighbor graph; one
    representative kept per component."""
    if threshold < 0:
        raise ParameterError("threshold must be >= 0")
    n = fs.n
    uf = _UnionFind(n)
    thr2 = threshold * threshold
    x = fs.matrix
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        d2 = _block_dist2(x[start:stop], x[start:])
        rows, cols = np.nonzero(d2 < thr2)
        for r, c in zip(rows, cols):
            i, j = start + int(r), start + int(c)
            if i < j:
                uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    components = []
    kept = []
    for root in sorted(groups, key=lambda r: min(fs.ids[i] for i in groups[r])):
        members = sorted(fs.ids[i] for i in groups[root])
        components.append(members)
        kept.append(members[0])
    return DedupReport(
        threshold=float(threshold),
        components=components,
        kept=kept,
        removed_count=n - len(kept),
    )


def apply_dedup_to_manifest(
    entries: list[ManifestEntry], report: DedupReport
) -> list[ManifestEntry]:
    keep = set(report.kept)
    return [e for e in entries if e.image_path in keep]


# ---------------------------------------------------------------------------
# built-in deterministic feature extractor


def builtin_features(
    manifest_path: str | Path, entries: list[ManifestEntry]
) -> FeatureSet:
    """16x16 grayscale downsample plus per-channel mean/variance, flattened.

    Deterministic stand-in for a pretrained embedding network; D = 256 + 2C.
    """
    root = Path(manifest_path).parent
    rows = []
    ids = []
    for e in entries:
        img = load_image(root / e.image_path)
        gray = img.mean(axis=0, keepdims=True)
        small = bilinear_resize(gray, 16, 16).reshape(-1)
        moments = np.concatenate([img.mean(axis=(1, 2)), img.var(axis=(1, 2))])
        rows.append(np.concatenate([small, moments]).astype(np.float32))
        ids.append(e.image_path)
    return FeatureSet(np.stack(rows), ids, source="builtin-16x16-moments")


# ---------------------------------------------------------------------------
# PFF1 feature file format: magic, u32 N, u32 D, N*D f32 LE, newline-separated ids


def save_features(path: str | Path, fs: FeatureSet) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", fs.n, fs.matrix.shape[1]))
        f.write(fs.matrix.astype("<f4").tobytes())
        f.write(("\n".join(fs.ids) + "\n").encode("utf-8"))


def load_features(path: str | Path) -> FeatureSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a PFF1 feature file")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header")
    n, d = struct.unpack("<II", raw[4:12])
    body_end = 12 + 4 * n * d
    if len(raw) < body_end:
        raise DataError(f"{path}: truncated matrix ({len(raw)} bytes, need {body_end})")
    matrix = np.frombuffer(raw[12:body_end], dtype="<f4").reshape(n, d).astype(np.float32)
    ids = raw[body_end:].decode("utf-8").split("\n")
    while ids and ids[-1] == "":
        ids.pop()
    if len(ids) != n:
        raise DataError(f"{path}: {len(ids)} ids for {n} rows")
    return FeatureSet(matrix, ids, source=str(path))
