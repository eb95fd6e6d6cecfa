"""Traffic pattern bank: embed the source corpus, cluster, score, persist.

Cosine k-means is realized as spherical k-means: rows are L2-normalized,
Lloyd iterations run with distance 1 - cos, and centroid updates renormalize
the member mean. Restarts use greedy farthest-point seeding; the best restart
by inertia wins, ties broken by restart index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import hashlib

import numpy as np
import torch

from .autoencoder import PatchEncoder, Standardizer
from .data import CityCorpus, enumerate_windows, patch_stack
from .errors import BankCorruptError, BankVersionError, DataError
from .seeding import rng_from

BANK_MAGIC = b"TPBBANK1"


@dataclass(frozen=True)
class PatternBank:
    """K x d centroid matrix; read-only after construction."""

    centroids: np.ndarray
    metric: str = "cosine"
    unit_normalized: bool = True
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        B = np.asarray(self.centroids, dtype=np.float32)
        if B.ndim != 2 or B.shape[0] < 2:
            raise DataError(f"bank must be [K >= 2, d], got {B.shape}")
        if self.unit_normalized:
            norms = np.linalg.norm(B.astype(np.float64), axis=1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise DataError("unit_normalized bank has non-unit rows")
        B.setflags(write=False)
        object.__setattr__(self, "centroids", B)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


class ClusterAssignment(NamedTuple):
    labels: np.ndarray
    inertia: float


# ---------------------------------------------------------------------------
# Corpus embedding


class PatchRef(NamedTuple):
    city_index: int
    node: int
    start_step: int
    patch: int
    hour_of_week: int


def corpus_patch_refs(corpus: CityCorpus, T0: int = 12, P: int = 24) -> list[PatchRef]:
    """Deterministic (city, node, time) order of every embedded patch."""
    refs = []
    for w in enumerate_windows(corpus, T0, P):
        series = corpus.cities[w.city_index]
        for j in range(P):
            hour = series.hour_of_week(w.start_step + j * T0)
            refs.append(PatchRef(w.city_index, w.node, w.start_step, j, hour))
    return refs


def embed_corpus(
    corpus: CityCorpus,
    encoder: PatchEncoder,
    scaler: Standardizer,
    T0: int = 12,
    P: int = 24,
    batch_size: int = 64,
) -> np.ndarray:
    """Encode every patch of every window with nothing masked; [n_total, d]."""
    windows = enumerate_windows(corpus, T0, P)
    if not windows:
        raise DataError("corpus yields no windows to embed")
    encoder.eval()
    out = np.empty((len(windows) * P, encoder.d), dtype=np.float32)
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    batch_x, batch_h, row = [], [], 0
    with torch.no_grad():
        for w in windows:
            key = (w.city_index, w.start_step)
            if key not in cache:
                cache[key] = patch_stack(corpus.cities[w.city_index], w.start_step, T0, P)
            stack, hours = cache[key]
            batch_x.append(scaler.apply(stack[w.node]))
            batch_h.append(hours)
            if len(batch_x) == batch_size:
                row = _flush_embed(encoder, batch_x, batch_h, out, row)
                batch_x, batch_h = [], []
        if batch_x:
            row = _flush_embed(encoder, batch_x, batch_h, out, row)
    if not np.isfinite(out).all():
        raise DataError("encoder produced non-finite embeddings")
    return out


def _flush_embed(encoder, batch_x, batch_h, out, row) -> int:
    x = torch.as_tensor(np.stack(batch_x), dtype=torch.float32)
    h = torch.as_tensor(np.stack(batch_h))
    H = encoder(x, h).numpy()
    n = H.shape[0] * H.shape[1]
    out[row : row + n] = H.reshape(n, -1)
    return row + n


def subsample_indices(n: int, sample_ratio: float, rng: int | np.random.Generator) -> np.ndarray:
    if not 0.0 < sample_ratio <= 1.0:
        raise DataError(f"sample_ratio must be in (0, 1], got {sample_ratio}")
    count = int(round(sample_ratio * n))
    if sample_ratio == 1.0:
        return np.arange(n)
    rng = rng_from(rng)
    return np.sort(rng.choice(n, size=count, replace=False))


def subsample(
    embeddings: np.ndarray, sample_ratio: float = 0.1, rng: int | np.random.Generator = 0
) -> np.ndarray:
    """Uniform order-preserving row subsample, round(ratio * n) rows."""
    return embeddings[subsample_indices(embeddings.shape[0], sample_ratio, rng)]


# ---------------------------------------------------------------------------
# Spherical k-means


def _normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if (norms <= 1e-12).any():
        raise DataError("zero-norm embedding row; cosine distance undefined")
    return X / norms


def _farthest_point_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    first = int(rng.integers(n))
    chosen = [first]
    min_dist = 1.0 - X @ X[first]
    for _ in range(1, K):
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, 1.0 - X @ X[nxt])
    return X[chosen].copy()


def _repair_empty(
    X: np.ndarray, centroids: np.ndarray, labels: np.ndarray, sims: np.ndarray
) -> np.ndarray:
    """Give each empty cluster the point farthest from its assigned centroid."""
    K = centroids.shape[0]
    counts = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(counts == 0):
        own = sims[np.arange(len(labels)), labels]
        eligible = counts[labels] > 1
        if not eligible.any():
            eligible = np.ones_like(own, dtype=bool)
        cand = np.where(eligible, own, np.inf)
        worst = int(np.argmin(cand))
        counts[labels[worst]] -= 1
        labels[worst] = k
        counts[k] = 1
        centroids[k] = X[worst]
    return labels


def _lloyd_once(
    X: np.ndarray, init_centroids: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """One restart. Returns (labels, centroids, inertia, per-iteration inertia)."""
    centroids = init_centroids.copy()
    labels = np.full(X.shape[0], -1, dtype=np.int64)
    trace: list[float] = []
    prev_inertia = np.inf
    for _ in range(max_iter):
        sims = X @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        new_labels = _repair_empty(X, centroids, new_labels, sims)
        sims = X @ centroids.T  # repair may have replaced centroids
        inertia = float(np.sum(1.0 - sims[np.arange(len(new_labels)), new_labels]))
        trace.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(centroids.shape[0]):
            members = X[labels == k]
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[k] = mean / norm
        if prev_inertia < np.inf and abs(prev_inertia - inertia) <= tol * max(prev_inertia, 1e-12):
            break
        prev_inertia = inertia
    # Enforce the fixed point: final labels are nearest-centroid. Repair
    # replaces a centroid, so re-assign until no cluster is empty.
    for _ in range(centroids.shape[0] + 1):
        sims = X @ centroids.T
        labels = np.argmax(sims, axis=1)
        if np.bincount(labels, minlength=centroids.shape[0]).min() > 0:
            break
        labels = _repair_empty(X, centroids, labels, sims)
    sims = X @ centroids.T
    inertia = float(np.sum(1.0 - sims[np.arange(len(labels)), labels]))
    trace.append(inertia)
    return labels, centroids, inertia, trace


def kmeans_cosine(
    embeddings: np.ndarray,
    K: int,
    n_init: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
    rng: int | np.random.Generator = 0,
    provenance: dict | None = None,
) -> tuple[PatternBank, ClusterAssignment]:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("embeddings must be a 2-d matrix")
    n = X.shape[0]
    if K < 2:
        raise DataError(f"need K >= 2 clusters, got {K}")
    if n < K:
        raise DataError(f"cannot form {K} clusters from {n} points")
    X = _normalize_rows(X)
    rng = rng_from(rng)

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for _restart in range(n_init):
        init = _farthest_point_init(X, K, rng)
        labels, centroids, inertia, _ = _lloyd_once(X, init, max_iter, tol)
        if best is None or inertia < best[0]:
            best = (inertia, labels, centroids)
    inertia, labels, centroids = best
    bank = PatternBank(
        centroids=centroids.astype(np.float32),
        metric="cosine",
        unit_normalized=True,
        provenance=provenance or {},
    )
    return bank, ClusterAssignment(labels=labels, inertia=inertia)


def assign_to_bank(embeddings: np.ndarray, bank: PatternBank) -> np.ndarray:
    """Nearest-centroid labels under the bank's cosine metric."""
    X = _normalize_rows(np.asarray(embeddings, dtype=np.float64))
    return np.argmax(X @ bank.centroids.T.astype(np.float64), axis=1)


def build_random_bank(
    embeddings: np.ndarray, K: int, rng: int | np.random.Generator = 0
) -> PatternBank:
    """Clustering bypassed: K uniformly chosen patch embeddings as the bank."""
    n = embeddings.shape[0]
    if K < 2 or n < K:
        raise DataError(f"cannot draw {K} bank rows from {n} embeddings")
    rng = rng_from(rng)
    rows = embeddings[np.sort(rng.choice(n, size=K, replace=False))]
    rows = _normalize_rows(rows.astype(np.float64))
    return PatternBank(
        centroids=rows.astype(np.float32),
        metric="cosine",
        unit_normalized=True,
        provenance={"method": "random"},
    )


# ---------------------------------------------------------------------------
# Silhouette and K selection


def silhouette_samples(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-point silhouette with cosine distance; singleton clusters score 0."""
    X = _normalize_rows(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    n = X.shape[0]
    if n < 3:
        raise DataError("silhouette needs at least 3 points")
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise DataError("silhouette needs at least 2 clusters")
    D = np.clip(1.0 - X @ X.T, 0.0, None)
    out = np.zeros(n)
    onehot = labels[:, None] == uniq[None, :]  # [n, K]
    counts = onehot.sum(axis=0)
    sums = D @ onehot.astype(np.float64)  # [n, K] total distance to each cluster
    for i in range(n):
        k = int(np.searchsorted(uniq, labels[i]))
        if counts[k] == 1:
            out[i] = 0.0
            continue
        a = sums[i, k] / (counts[k] - 1)
        other = [sums[i, j] / counts[j] for j in range(len(uniq)) if j != k]
        b = min(other)
        denom = max(a, b)
        out[i] = 0.0 if denom == 0 else (b - a) / denom
    return out


def silhouette(embeddings: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(silhouette_samples(embeddings, labels)))


def select_k(
    embeddings: np.ndarray,
    k_grid: list[int],
    rng: int | np.random.Generator = 0,
    n_init: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[int, dict[int, float]]:
    """Cluster at every K in the grid, pick the silhouette argmax.

    Ties break toward the smaller K; the grid is processed in sorted order so
    the rng stream is order-independent of how the grid was written.
    """
    if not k_grid:
        raise DataError("empty K grid")
    rng = rng_from(rng)
    scores: dict[int, float] = {}
    for K in sorted(set(k_grid)):
        _, assign = kmeans_cosine(embeddings, K, n_init=n_init, max_iter=max_iter, tol=tol, rng=rng)
        scores[K] = silhouette(embeddings, assign.labels)
    best_k = min(scores, key=lambda k: (-scores[k], k))
    return best_k, scores


DEFAULT_K_GRID = [4, 8, 10, 16, 32, 64]


# ---------------------------------------------------------------------------
# Bank file format


def save_bank(path: str | Path, bank: PatternBank) -> None:
    payload = np.ascontiguousarray(bank.centroids, dtype=np.float32).tobytes()
    header = {
        "K": bank.K,
        "d": bank.d,
        "metric": bank.metric,
        "unit_normalized": bank.unit_normalized,
        "seed": bank.provenance.get("seed"),
        "silhouette": bank.provenance.get("silhouette"),
        "provenance": bank.provenance,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_bank(path: str | Path) -> PatternBank:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(BANK_MAGIC) or raw[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise BankVersionError(f"{path}: bad magic; not a pattern bank or wrong version")
    off = len(BANK_MAGIC)
    if len(raw) < off + 4:
        raise BankCorruptError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    if len(raw) < off + hlen:
        raise BankCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankCorruptError(f"{path}: unreadable header: {exc}") from exc
    off += hlen
    K, d = int(header["K"]), int(header["d"])
    payload = raw[off:]
    if len(payload) != K * d * 4:
        raise BankCorruptError(
            f"{path}: payload holds {len(payload)} bytes, expected {K * d * 4}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise BankCorruptError(f"{path}: payload hash mismatch")
    B = np.frombuffer(payload, dtype=np.float32).reshape(K, d)
    return PatternBank(
        centroids=B,
        metric=str(header["metric"]),
        unit_normalized=bool(header["unit_normalized"]),
        provenance=dict(header.get("provenance", {})),
    )
