"""Synthetic identity data, gallery/known/unknown splits, and embedding files.

Embedding file layout (UTF-8 text)::

    # comments anywhere
    dim=<d>
    kind=raw            (optional; marks raw encoder inputs)
    label,v1,v2,...,vd
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ProtocolError
from .geometry import l2_normalize


@dataclass(frozen=True)
class SyntheticConfig:
    """Seeded Gaussian identities in raw input space.

    Setting ``identity_rank=input_dim``, ``nuisance_spread=0`` and
    ``quality_min=1`` gives plain isotropic clusters: center ~ N(0, center_scale^2 I),
    sample = center + N(0, cluster_spread^2 I).

    The defaults add two realistic nuisances. Identity centers span a random
    ``identity_rank``-dimensional subspace (scaled so the expected squared norm
    is still ``input_dim * center_scale^2``) while the complement carries
    identity-free noise of scale ``nuisance_spread``. Evaluation samples also
    vary in quality: ``q * center + (1 - q) * degraded`` with
    ``q ~ U(quality_min, 1)``, where ``degraded`` is one shared identity-free
    appearance inside the identity subspace. Pretraining data stays at q = 1.
    """

    num_pretrain_ids: int = 200
    pretrain_samples_per_id: int = 40
    num_eval_ids: int = 100
    samples_per_id: int = 12
    input_dim: int = 64
    cluster_spread: float = 0.6
    center_scale: float = 1.0
    identity_rank: int = 16
    nuisance_spread: float = 2.0
    quality_min: float = 0.3
    degraded_scale: float = 1.0
    # Noise multiplier for eval samples past the first `gallery_pool` of each
    # identity, a stand-in for a gallery/probe quality gap.
    probe_noise: float = 1.0
    gallery_pool: int = 5
    seed: int = 0

    def validate(self):
        if self.num_eval_ids % 2:
            raise ProtocolError("num_eval_ids must be even so known and unknown halves match")
        if min(self.num_pretrain_ids, self.num_eval_ids, self.samples_per_id,
               self.pretrain_samples_per_id, self.input_dim) < 1:
            raise ProtocolError("synthetic dataset sizes must be positive")
        if not 1 <= self.identity_rank <= self.input_dim:
            raise ProtocolError("identity_rank must lie in [1, input_dim]")
        if min(self.cluster_spread, self.nuisance_spread, self.probe_noise, self.degraded_scale) < 0:
            raise ProtocolError("spreads and noise scales must be non-negative")
        if self.center_scale <= 0:
            raise ProtocolError("center_scale must be positive")
        if not 0 <= self.quality_min <= 1:
            raise ProtocolError("quality_min must lie in [0, 1]")


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    sample_id: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_id = np.asarray(self.sample_id, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.x.shape[1]


def generate_synthetic(cfg=SyntheticConfig()):
    """Returns ``(pretrain, evaluation)`` raw-input datasets.

    Identity ids are disjoint: pretrain uses ``0..P-1``, evaluation
    ``P..P+E-1``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, r = cfg.input_dim, cfg.identity_rank
    basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
    ident, nuis = basis[:, :r], basis[:, r:]
    center_sd = cfg.center_scale * np.sqrt(d / r)
    degraded = rng.normal(0.0, cfg.degraded_scale * center_sd, r) @ ident.T

    def make(ids, per_id, noisy_from=None, quality_min=1.0):
        centers = rng.normal(0.0, center_sd, (len(ids), r)) @ ident.T
        noise = rng.normal(0.0, cfg.cluster_spread, (len(ids), per_id, d))
        noise += rng.normal(0.0, cfg.nuisance_spread, (len(ids), per_id, d - r)) @ nuis.T
        if noisy_from is not None:
            noise[:, noisy_from:, :] *= cfg.probe_noise
        quality = rng.uniform(quality_min, 1.0, (len(ids), per_id, 1))
        x = (quality * centers[:, None, :] + (1.0 - quality) * degraded + noise).reshape(-1, d)
        labels = np.repeat(ids, per_id)
        return Dataset(x, labels, np.arange(len(labels)))

    pretrain = make(np.arange(cfg.num_pretrain_ids), cfg.pretrain_samples_per_id)
    eval_ids = np.arange(cfg.num_pretrain_ids, cfg.num_pretrain_ids + cfg.num_eval_ids)
    evaluation = make(eval_ids, cfg.samples_per_id, cfg.gallery_pool, cfg.quality_min)
    return pretrain, evaluation


@dataclass
class OSFISplit:
    """Gallery G, known probes K, unknown probes U.

    Known identities are relabeled ``0..C-1`` and unknown ones ``C..``;
    ``identity_map`` maps new labels back to the source ids. ``*_ids`` hold
    source sample ids, so leakage checks compare identifiers, not values.
    """

    gallery: Dataset
    known: Dataset
    unknown: Dataset
    m: int
    identity_map: dict

    @property
    def C(self):
        return len(np.unique(self.gallery.labels))

    @property
    def classes(self):
        return np.unique(self.gallery.labels)

    def probes(self):
        """All probes, known first: ``(x, labels, is_known)``."""
        x = np.concatenate([self.known.x, self.unknown.x])
        labels = np.concatenate([self.known.labels, self.unknown.labels])
        is_known = np.concatenate([np.ones(len(self.known), bool), np.zeros(len(self.unknown), bool)])
        return x, labels, is_known


def make_split(data, m=3, seed=0, gallery_pool=None):
    """Halve identities into known/unknown; draw m gallery samples per known id.

    With ``gallery_pool`` set, gallery samples are drawn only from each
    identity's first ``gallery_pool`` samples in file order.
    """
    if m < 1:
        raise ProtocolError("gallery size m must be at least 1")
    ids = np.unique(data.labels)
    if len(ids) % 2:
        raise ProtocolError(f"{len(ids)} identities cannot be split evenly into known and unknown")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ids)
    known_ids = np.sort(perm[:len(ids) // 2])
    unknown_ids = np.sort(perm[len(ids) // 2:])

    g_rows, k_rows = [], []
    for identity in known_ids:
        rows = np.flatnonzero(data.labels == identity)
        if len(rows) < m + 1:
            raise ProtocolError(
                f"identity {identity} has {len(rows)} samples; need at least {m + 1} for m={m}"
            )
        pool = rows if gallery_pool is None else rows[:gallery_pool]
        if len(pool) < m:
            raise ProtocolError(f"identity {identity} has fewer than m={m} gallery candidates")
        chosen = np.sort(rng.choice(pool, size=m, replace=False))
        g_rows.append(chosen)
        k_rows.append(np.setdiff1d(rows, chosen))
    u_rows = np.flatnonzero(np.isin(data.labels, unknown_ids))

    relabel = {int(s): j for j, s in enumerate(known_ids)}
    relabel.update({int(s): len(known_ids) + j for j, s in enumerate(unknown_ids)})

    def subset(rows):
        rows = np.concatenate(rows) if isinstance(rows, list) else rows
        new = np.array([relabel[int(v)] for v in data.labels[rows]], dtype=np.int64)
        return Dataset(data.x[rows], new, data.sample_id[rows])

    return OSFISplit(subset(g_rows), subset(k_rows), subset(u_rows), m,
                     {v: k for k, v in relabel.items()})


@dataclass
class EmbeddingFile:
    dim: int
    labels: np.ndarray
    vectors: np.ndarray
    kind: str | None = None

    def dataset(self):
        return Dataset(self.vectors, self.labels, np.arange(len(self.labels)))


def format_embeddings(vectors, labels, kind=None, comment=None):
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append(f"dim={vectors.shape[1]}")
    if kind:
        lines.append(f"kind={kind}")
    for label, row in zip(labels, vectors):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_embeddings(path, vectors, labels, kind=None, comment=None):
    text = format_embeddings(vectors, labels, kind, comment)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_embeddings(text, normalize=False):
    dim = None
    kind = None
    labels, rows = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line and "," not in line:
            key, _, value = line.partition("=")
            key = key.strip()
            if rows:
                raise ParseError(f"header {key!r} after data rows", lineno)
            if key == "dim":
                if dim is not None:
                    raise ParseError("duplicate dim header", lineno)
                try:
                    dim = int(value)
                except ValueError:
                    raise ParseError(f"bad dim value {value!r}", lineno) from None
                if dim < 1:
                    raise ParseError("dim must be positive", lineno)
            elif key == "kind":
                if kind is not None:
                    raise ParseError("duplicate kind header", lineno)
                kind = value.strip()
            else:
                raise ParseError(f"unknown header {key!r}", lineno)
            continue
        if dim is None:
            raise ParseError("data row before the dim header", lineno)
        fields = line.split(",")
        if len(fields) != dim + 1:
            raise ParseError(f"expected {dim} components, found {len(fields) - 1}", lineno)
        try:
            labels.append(int(fields[0]))
            rows.append([float(f) for f in fields[1:]])
        except ValueError as exc:
            raise ParseError(f"non-numeric token ({exc})", lineno) from None
    if dim is None:
        raise ProtocolError("embedding file has no dim header")
    if not rows:
        raise ProtocolError("embedding file has no data rows")
    vectors = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(vectors)):
        raise ProtocolError("embedding file contains non-finite values")
    if normalize:
        vectors = l2_normalize(vectors)
    return EmbeddingFile(dim, np.array(labels, dtype=np.int64), vectors, kind)


def load_embeddings(path, normalize=False):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ProtocolError(f"cannot read {path}: {exc}") from None
    return parse_embeddings(text, normalize=normalize)


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
