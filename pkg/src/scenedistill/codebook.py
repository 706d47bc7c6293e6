"""Pose-embedding codebook: k-means construction and cosine top-k retrieval.

Records pair an opaque pose id with a unit-norm embedding vector (the mean
of per-view embeddings). The codebook clusters those embeddings, remembers
one key pose per cluster, and answers text queries by ranking centroids by
cosine similarity.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"IFCB"
VERSION = 1

DEFAULT_TOP_K = 7


class CodebookError(ValueError):
    """Bad arguments or malformed codebook data."""


@dataclass(frozen=True)
class PoseRecord:
    """An embedded pose: id, unit-norm embedding, number of views averaged."""

    pose_id: str
    embedding: np.ndarray
    view_count: int = 1

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise CodebookError("embedding must be a 1-D vector")
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > 1e-6:
            raise CodebookError(f"embedding of {self.pose_id!r} is not unit-norm (|v|={norm:.8f})")
        if self.view_count < 1:
            raise CodebookError("view_count must be >= 1")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (pose_id, cosine similarity) pairs, best first."""

    ranked: list[tuple[str, float]]
    k: int

    @property
    def pose_ids(self) -> list[str]:
        return [pid for pid, _ in self.ranked]

    @property
    def similarities(self) -> list[float]:
        return [sim for _, sim in self.ranked]


@dataclass
class PoseCodebook:
    """K unit-norm centroids, one key pose per cluster, full membership lists."""

    centroids: np.ndarray          # (K, D) float
    key_pose_ids: list[str]        # len K
    clusters: list[list[str]]      # len K, member pose ids
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


def average_view_embeddings(view_embeddings) -> np.ndarray:
    """Mean of per-view embedding vectors, renormalized to unit length."""
    if len(view_embeddings) == 0:
        raise CodebookError("need at least one view embedding")
    mat = np.asarray(view_embeddings, dtype=np.float64)
    if mat.ndim != 2:
        raise CodebookError("view embeddings must share one dimension")
    mean = mat.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise CodebookError("view embeddings average to the zero vector")
    return mean / norm


def _farthest_first_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """First seed drawn from rng, the rest greedily farthest from chosen seeds."""
    n = points.shape[0]
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = rng.integers(n)
    d2 = np.sum((points - points[seeds[0]]) ** 2, axis=1)
    for j in range(1, k):
        seeds[j] = int(np.argmax(d2))  # argmax takes the lowest index on ties
        d2 = np.minimum(d2, np.sum((points - points[seeds[j]]) ** 2, axis=1))
    return seeds


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared Euclidean; argmin resolves ties toward the lower centroid index
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def lloyd_kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 100):
    """Deterministic Lloyd iterations with farthest-first seeding.

    Empty clusters steal the point currently farthest from its assigned
    centroid. Returns (labels, centroids, inertia_history); the history is
    one value per assignment pass and is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise CodebookError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = points[_farthest_first_seeds(points, k, rng)].copy()
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        new_labels = _assign(points, centroids)
        # patch empty clusters before accepting the assignment
        for j in range(k):
            if not np.any(new_labels == j):
                resid = np.sum((points - centroids[new_labels]) ** 2, axis=1)
                donor = int(np.argmax(resid))
                new_labels[donor] = j
                centroids[j] = points[donor]
        d2 = np.sum((points - centroids[new_labels]) ** 2, axis=1)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
    return labels, centroids, history


def build_codebook(records, K: int, seed: int = 0, max_iters: int = 100) -> PoseCodebook:
    """Cluster record embeddings into K centroids and pick per-cluster key poses.

    The key pose of a cluster is the member with the highest cosine
    similarity to its centroid (lowest record index on ties). Centroids are
    renormalized to unit length after clustering. Deterministic for a fixed
    (record order, K, seed, max_iters).
    """
    records = list(records)
    if K > len(records):
        raise CodebookError(f"K={K} exceeds record count {len(records)}")
    points = np.stack([r.embedding for r in records])
    labels, centroids, history = lloyd_kmeans(points, K, seed, max_iters)
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    centroids = centroids / np.maximum(norms, 1e-12)

    key_ids: list[str] = []
    clusters: list[list[str]] = []
    for j in range(K):
        member_idx = np.flatnonzero(labels == j)
        sims = points[member_idx] @ centroids[j]
        best = member_idx[int(np.argmax(sims))]
        key_ids.append(records[best].pose_id)
        clusters.append([records[i].pose_id for i in member_idx])
    return PoseCodebook(centroids=centroids, key_pose_ids=key_ids, clusters=clusters,
                        inertia_history=history)


def retrieve_topk(codebook: PoseCodebook, query, k: int = DEFAULT_TOP_K) -> RetrievalResult:
    """Rank centroids by cosine similarity to `query`; return key pose ids.

    Ties break toward the lower centroid index. Returns min(k, K) entries.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (codebook.D,):
        raise CodebookError(f"query dimension {query.shape} != ({codebook.D},)")
    if k < 1:
        raise CodebookError("k must be >= 1")
    qnorm = float(np.linalg.norm(query))
    if qnorm < 1e-12:
        raise CodebookError("query is the zero vector")
    sims = codebook.centroids @ (query / qnorm)
    order = np.argsort(-sims, kind="stable")[: min(k, codebook.K)]
    ranked = [(codebook.key_pose_ids[int(j)], float(sims[int(j)])) for j in order]
    return RetrievalResult(ranked=ranked, k=k)


def sample_cluster(codebook: PoseCodebook, centroid_index: int, seed: int) -> str:
    """Uniform draw from a cluster's member list, deterministic per seed."""
    if not 0 <= centroid_index < codebook.K:
        raise CodebookError(f"centroid index {centroid_index} out of range")
    members = codebook.clusters[centroid_index]
    if not members:
        raise RuntimeError("empty cluster: construction should have prevented this")
    rng = np.random.default_rng(seed)
    return members[int(rng.integers(len(members)))]


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CodebookError("truncated codebook file")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_codebook(codebook: PoseCodebook, path) -> None:
    """Serialize to the binary codebook format (magic IFCB, little-endian)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, codebook.K, codebook.D))
    buf.write(codebook.centroids.astype("<f4").tobytes(order="C"))
    for j in range(codebook.K):
        members = codebook.clusters[j]
        buf.write(struct.pack("<I", len(members)))
        for pid in members:
            _write_str(buf, pid)
        buf.write(struct.pack("<I", members.index(codebook.key_pose_ids[j])))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_codebook(path) -> PoseCodebook:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CodebookError("not a codebook file (bad magic)")
        version, K, D = struct.unpack("<III", _read_exact(fh, 12))
        if version != VERSION:
            raise CodebookError(f"unsupported codebook version {version}")
        cents = np.frombuffer(_read_exact(fh, 4 * K * D), dtype="<f4").reshape(K, D)
        clusters: list[list[str]] = []
        key_ids: list[str] = []
        for _ in range(K):
            (count,) = struct.unpack("<I", _read_exact(fh, 4))
            members = [_read_str(fh) for _ in range(count)]
            (key_idx,) = struct.unpack("<I", _read_exact(fh, 4))
            if key_idx >= count:
                raise CodebookError("key index outside cluster")
            clusters.append(members)
            key_ids.append(members[key_idx])
    return PoseCodebook(centroids=cents.astype(np.float64), key_pose_ids=key_ids,
                        clusters=clusters)
