"""Trainable MLP encoder with BatchNorm and hand-derived backpropagation.

Each hidden block is linear -> BatchNorm -> ReLU, optionally with a parallel
adapter summed into the linear output. A final linear layer maps to the
embedding dimension. Parameters are exposed as a flat ``name -> array``
dict whose arrays are the live layer storage, so in-place optimizer updates
act on the layers directly.

Fine-tuning regimes pick which names are trainable:

* ``full``      every linear and BatchNorm parameter
* ``partial``   the last two blocks and the output layer
* ``adapter``   adapter factors only; base weights frozen
* ``bn_only``   BatchNorm gamma/beta only
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericalError, ProtocolError
from .head import Classifier, CosFaceConfig, cosface_loss, predict
from .optim import AdamState, adam_step

MODES = ("full", "partial", "adapter", "bn_only")


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @classmethod
    def init(cls, n_in, n_out, rng):
        bound = 1.0 / np.sqrt(n_in)
        return cls(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out))


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, n, momentum=0.1, eps=1e-5):
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), momentum, eps)


@dataclass
class ParallelAdapter:
    """Zero-initialized low-rank path added to a linear layer: ``y += up @ down @ x``.

    ``up`` starts at zero so an enabled adapter is output-neutral until trained.
    """

    up: np.ndarray  # (out, rank)
    down: np.ndarray  # (rank, in)
    enabled: bool = False

    @classmethod
    def init(cls, n_in, n_out, rank, rng):
        return cls(np.zeros((n_out, rank)), rng.normal(0.0, 1.0 / np.sqrt(n_in), (rank, n_in)))

    @property
    def weight(self):
        return self.up @ self.down


@dataclass
class Block:
    linear: LinearLayer
    bn: BatchNormLayer
    adapter: ParallelAdapter


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    hidden: int = 128
    depth: int = 4
    output_dim: int = 32
    adapter_rank: int = 16
    seed: int = 0


class MLPEncoder:
    def __init__(self, blocks, output, mode="full"):
        self.blocks = blocks
        self.output = output
        self.mode = None
        set_finetune_mode(self, mode)

    @classmethod
    def create(cls, cfg=EncoderConfig()):
        rng = np.random.default_rng(cfg.seed)
        blocks = []
        n_in = cfg.input_dim
        for _ in range(cfg.depth):
            blocks.append(Block(
                LinearLayer.init(n_in, cfg.hidden, rng),
                BatchNormLayer.init(cfg.hidden),
                ParallelAdapter.init(n_in, cfg.hidden, cfg.adapter_rank, rng),
            ))
            n_in = cfg.hidden
        return cls(blocks, LinearLayer.init(n_in, cfg.output_dim, rng))

    @property
    def input_dim(self):
        return self.blocks[0].linear.weight.shape[1]

    @property
    def output_dim(self):
        return self.output.weight.shape[0]

    def parameters(self):
        params = {}
        for i, blk in enumerate(self.blocks):
            params[f"blocks.{i}.linear.weight"] = blk.linear.weight
            params[f"blocks.{i}.linear.bias"] = blk.linear.bias
            params[f"blocks.{i}.bn.gamma"] = blk.bn.gamma
            params[f"blocks.{i}.bn.beta"] = blk.bn.beta
            params[f"blocks.{i}.adapter.up"] = blk.adapter.up
            params[f"blocks.{i}.adapter.down"] = blk.adapter.down
        params["output.weight"] = self.output.weight
        params["output.bias"] = self.output.bias
        return params

    def buffers(self):
        bufs = {}
        for i, blk in enumerate(self.blocks):
            bufs[f"blocks.{i}.bn.running_mean"] = blk.bn.running_mean
            bufs[f"blocks.{i}.bn.running_var"] = blk.bn.running_var
        return bufs

    def state_dict(self):
        """Copies of all parameters and buffers, for comparisons and snapshots."""
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def copy(self):
        clone = MLPEncoder.__new__(MLPEncoder)
        clone.blocks = [
            Block(
                LinearLayer(b.linear.weight.copy(), b.linear.bias.copy()),
                BatchNormLayer(b.bn.gamma.copy(), b.bn.beta.copy(), b.bn.running_mean.copy(),
                               b.bn.running_var.copy(), b.bn.momentum, b.bn.eps),
                ParallelAdapter(b.adapter.up.copy(), b.adapter.down.copy(), b.adapter.enabled),
            )
            for b in self.blocks
        ]
        clone.output = LinearLayer(self.output.weight.copy(), self.output.bias.copy())
        clone.mode = self.mode
        clone.trainable = set(self.trainable)
        return clone


def trainable_names(enc, mode):
    L = len(enc.blocks)
    names = set()
    for i in range(L):
        bn = {f"blocks.{i}.bn.gamma", f"blocks.{i}.bn.beta"}
        lin = {f"blocks.{i}.linear.weight", f"blocks.{i}.linear.bias"}
        if mode == "full" or (mode == "partial" and i >= L - 2):
            names |= bn | lin
        elif mode == "bn_only":
            names |= bn
        elif mode == "adapter":
            names |= {f"blocks.{i}.adapter.up", f"blocks.{i}.adapter.down"}
    if mode in ("full", "partial"):
        names |= {"output.weight", "output.bias"}
    return names


def set_finetune_mode(enc, mode):
    """Switch the trainable set to one regime and return the parameter-count report.

    Entering ``adapter`` mode enables the adapters; they stay enabled after a
    later mode switch so trained adapter weights keep contributing. ``total``
    counts the base encoder only; adapter factors are reported as added
    parameters.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown fine-tuning mode {mode!r}; expected one of {MODES}")
    enc.mode = mode
    enc.trainable = trainable_names(enc, mode)
    for blk in enc.blocks:
        blk.adapter.enabled = blk.adapter.enabled or mode == "adapter"
    return parameter_report(enc)


def parameter_report(enc):
    params = enc.parameters()
    total = sum(v.size for k, v in params.items() if ".adapter." not in k)
    return {
        "mode": enc.mode,
        "trainable": sum(params[k].size for k in enc.trainable),
        "total": total,
        "adapter_added": sum(v.size for k, v in params.items() if ".adapter." in k),
    }


@dataclass
class ForwardCache:
    batch_size: int
    training: bool
    layers: list = field(default_factory=list)
    h_last: np.ndarray = None


def forward(enc, x, training=False):
    """Map raw inputs (B, input_dim) to embeddings (B, output_dim).

    Training mode normalizes with batch statistics and updates the running
    estimates; eval mode uses the running estimates. Returns ``(out, cache)``;
    the cache is only meaningful for backward after a training-mode call.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise ProtocolError(f"expected inputs of shape (B, {enc.input_dim}), got {x.shape}")
    if training and len(x) < 2:
        raise ProtocolError("training-mode BatchNorm needs a batch of at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite encoder input")
    cache = ForwardCache(len(x), training)
    h = x
    for i, blk in enumerate(enc.blocks):
        z = h @ blk.linear.weight.T + blk.linear.bias
        a_mid = None
        if blk.adapter.enabled:
            a_mid = h @ blk.adapter.down.T
            z = z + a_mid @ blk.adapter.up.T
        bn = blk.bn
        if training:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            bn.running_mean *= 1.0 - bn.momentum
            bn.running_mean += bn.momentum * mu
            bn.running_var *= 1.0 - bn.momentum
            bn.running_var += bn.momentum * var
        else:
            mu, var = bn.running_mean, bn.running_var
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        z_hat = (z - mu) * inv_std
        y = bn.gamma * z_hat + bn.beta
        out = np.maximum(y, 0.0)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite activation in block {i}")
        cache.layers.append((h, a_mid, z_hat, inv_std, y))
        h = out
    cache.h_last = h
    emb = h @ enc.output.weight.T + enc.output.bias
    if not np.all(np.isfinite(emb)):
        raise NumericalError("non-finite encoder output")
    return emb, cache


def _bn_backward(d_y, z_hat, inv_std, gamma):
    n = len(d_y)
    d_gamma = np.sum(d_y * z_hat, axis=0)
    d_beta = d_y.sum(axis=0)
    d_zhat = d_y * gamma
    d_z = inv_std / n * (n * d_zhat - d_zhat.sum(axis=0) - z_hat * np.sum(d_zhat * z_hat, axis=0))
    return d_z, d_gamma, d_beta


def backward(enc, cache, d_out, respect_mode=True):
    """Gradients of a scalar loss w.r.t. every encoder parameter.

    Includes the dependence of BatchNorm batch statistics on the inputs. With
    ``respect_mode`` set, frozen parameters get exact zero gradients and are
    not computed.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if cache is None or cache.h_last is None or len(d_out) != cache.batch_size:
        raise ProtocolError("gradient does not match the cached forward batch")
    if not cache.training:
        raise ProtocolError("backward needs the cache of a training-mode forward")
    live = enc.trainable if respect_mode else set(enc.parameters())
    grads = {name: np.zeros_like(p) for name, p in enc.parameters().items()}

    def put(name, fn):
        if name in live:
            grads[name] = fn()

    put("output.weight", lambda: d_out.T @ cache.h_last)
    put("output.bias", lambda: d_out.sum(axis=0))
    d_h = d_out @ enc.output.weight
    for i in reversed(range(len(enc.blocks))):
        blk = enc.blocks[i]
        h_in, a_mid, z_hat, inv_std, y = cache.layers[i]
        d_y = d_h * (y > 0)
        d_z, d_gamma, d_beta = _bn_backward(d_y, z_hat, inv_std, blk.bn.gamma)
        put(f"blocks.{i}.bn.gamma", lambda: d_gamma)
        put(f"blocks.{i}.bn.beta", lambda: d_beta)
        put(f"blocks.{i}.linear.weight", lambda: d_z.T @ h_in)
        put(f"blocks.{i}.linear.bias", lambda: d_z.sum(axis=0))
        if blk.adapter.enabled:
            d_mid = d_z @ blk.adapter.up
            put(f"blocks.{i}.adapter.up", lambda: d_z.T @ a_mid)
            put(f"blocks.{i}.adapter.down", lambda: d_mid.T @ h_in)
        if i > 0:
            d_h = d_z @ blk.linear.weight
            if blk.adapter.enabled:
                d_h = d_h + d_mid @ blk.adapter.down
    return grads


LR_BY_MODE = {"full": 1e-4, "adapter": 1e-4, "partial": 1e-3, "bn_only": 1e-3}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float | None = None  # None picks the per-mode default
    seed: int = 0
    input_jitter: float = 0.0
    loss: CosFaceConfig = CosFaceConfig()

    def lr_for(self, mode):
        return self.learning_rate if self.learning_rate is not None else LR_BY_MODE[mode]


def _batches(n, batch_size, rng):
    """ceil(n / batch_size) shuffled batches of near-equal size (never a lone sample)."""
    order = rng.permutation(n)
    count = max(-(-n // batch_size), 1)
    if count > 1 and n // count < 2:
        count = n // 2
    return np.array_split(order, count)


@dataclass
class TrainResult:
    losses: list
    epochs: int
    steps: int
    accuracy: float | None = None
    converged: bool | None = None


def embed(enc, x, batch_size=4096):
    """Eval-mode embeddings for raw inputs."""
    x = np.asarray(x, dtype=np.float64)
    chunks = [forward(enc, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks) if chunks else np.empty((0, enc.output_dim))


def train_accuracy(enc, clf, x, labels):
    return float(np.mean(predict(embed(enc, x), clf) == clf.targets(labels)))


def finetune(enc, clf, x, labels, cfg=TrainConfig(), mode=None, stop_accuracy=None):
    """Jointly train the encoder's trainable parameters and the classifier.

    Runs ``epochs * ceil(N / batch_size)`` Adam steps under a cosine schedule,
    with CosFace on the classifier logits. ``mode`` (if given) switches the
    encoder regime first. With ``stop_accuracy`` set, training ends early once
    eval-mode training accuracy reaches it. Updates ``enc`` and ``clf`` in
    place; the per-epoch mean losses are returned.
    """
    if mode is not None:
        set_finetune_mode(enc, mode)
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ProtocolError("cannot fine-tune on an empty gallery")
    if len(x) < 2:
        raise ProtocolError("fine-tuning needs at least two samples for BatchNorm statistics")
    targets = clf.targets(labels)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(x) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    lr = cfg.lr_for(enc.mode)

    params = {name: p for name, p in enc.parameters().items() if name in enc.trainable}
    params["classifier"] = clf.weight
    state = AdamState()
    losses = []
    step = 0
    acc = None
    if stop_accuracy is not None:
        acc = train_accuracy(enc, clf, x, labels)
    for epoch in range(cfg.epochs):
        if stop_accuracy is not None and acc >= stop_accuracy:
            break
        epoch_losses = []
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb = x[idx]
            if cfg.input_jitter > 0:
                xb = xb + rng.normal(0.0, cfg.input_jitter, xb.shape)
            emb, cache = forward(enc, xb, training=True)
            loss, d_emb, d_W = cosface_loss(emb, targets[idx], clf.weight, cfg.loss)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(enc, cache, d_emb)
            grads["classifier"] = d_W
            adam_step(params, grads, state, lr, step, total)
            epoch_losses.append(loss)
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        if stop_accuracy is not None:
            acc = train_accuracy(enc, clf, x, labels)
    converged = None if stop_accuracy is None else acc >= stop_accuracy
    return TrainResult(losses, len(losses), step, acc, converged)


# Checkpoint format: b"OSFI1", u32 record count, then per record a u8 kind tag,
# its u32 shape dims (count fixed per kind) and little-endian f64 payload.
MAGIC = b"OSFI1"
TAG_LINEAR, TAG_BN, TAG_ADAPTER, TAG_CLASSIFIER = 1, 2, 3, 4
_NDIMS = {TAG_LINEAR: 2, TAG_BN: 1, TAG_ADAPTER: 3, TAG_CLASSIFIER: 2}


def _record(tag, dims, *arrays):
    head = struct.pack("<B", tag) + struct.pack(f"<{len(dims)}I", *dims)
    payload = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in arrays])
    return head + payload.astype("<f8").tobytes()


def checkpoint_bytes(enc, clf=None):
    records = []
    for blk in enc.blocks:
        lin, bn, ad = blk.linear, blk.bn, blk.adapter
        records.append(_record(TAG_LINEAR, lin.weight.shape, lin.weight, lin.bias))
        records.append(_record(TAG_BN, bn.gamma.shape, bn.gamma, bn.beta, bn.running_mean,
                               bn.running_var, [bn.momentum, bn.eps]))
        out, rank = ad.up.shape
        records.append(_record(TAG_ADAPTER, (out, rank, ad.down.shape[1]), ad.up, ad.down,
                               [float(ad.enabled)]))
    records.append(_record(TAG_LINEAR, enc.output.weight.shape, enc.output.weight, enc.output.bias))
    if clf is not None:
        records.append(_record(TAG_CLASSIFIER, clf.weight.shape, clf.weight, clf.labels))
    return MAGIC + struct.pack("<I", len(records)) + b"".join(records)


def _read_records(data):
    if data[:len(MAGIC)] != MAGIC:
        raise ProtocolError("not an OSFI1 checkpoint (bad magic)")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records = []
    for _ in range(count):
        (tag,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if tag not in _NDIMS:
            raise ProtocolError(f"unknown checkpoint record tag {tag}")
        dims = struct.unpack_from(f"<{_NDIMS[tag]}I", data, pos)
        pos += 4 * len(dims)
        if tag == TAG_LINEAR:
            n = dims[0] * dims[1] + dims[0]
        elif tag == TAG_BN:
            n = 4 * dims[0] + 2
        elif tag == TAG_ADAPTER:
            n = dims[0] * dims[1] + dims[1] * dims[2] + 1
        else:
            n = dims[0] * dims[1] + dims[0]
        payload = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        records.append((tag, dims, payload))
    if pos != len(data):
        raise ProtocolError("trailing bytes after the last checkpoint record")
    return records


def checkpoint_from_bytes(data, mode="full"):
    try:
        records = _read_records(data)
    except (struct.error, ValueError) as exc:
        raise ProtocolError(f"truncated checkpoint: {exc}") from None
    clf = None
    if records and records[-1][0] == TAG_CLASSIFIER:
        _, (C, d), payload = records.pop()
        clf = Classifier(payload[:C * d].reshape(C, d).copy(), payload[C * d:].astype(np.int64))
    if len(records) < 4 or (len(records) - 1) % 3:
        raise ProtocolError("checkpoint does not describe a block encoder")
    blocks = []
    for j in range(0, len(records) - 1, 3):
        (t1, (o, i), p1), (t2, (n,), p2), (t3, (ao, r, ai), p3) = records[j:j + 3]
        if (t1, t2, t3) != (TAG_LINEAR, TAG_BN, TAG_ADAPTER):
            raise ProtocolError("unexpected record order in checkpoint")
        lin = LinearLayer(p1[:o * i].reshape(o, i).copy(), p1[o * i:].copy())
        bn = BatchNormLayer(*(p2[k * n:(k + 1) * n].copy() for k in range(4)),
                            momentum=float(p2[4 * n]), eps=float(p2[4 * n + 1]))
        ad = ParallelAdapter(p3[:ao * r].reshape(ao, r).copy(),
                             p3[ao * r:ao * r + r * ai].reshape(r, ai).copy(), bool(p3[-1]))
        blocks.append(Block(lin, bn, ad))
    tag, (o, i), p = records[-1]
    if tag != TAG_LINEAR:
        raise ProtocolError("checkpoint is missing the output layer")
    output = LinearLayer(p[:o * i].reshape(o, i).copy(), p[o * i:].copy())
    return MLPEncoder(blocks, output, mode=mode), clf


def save_checkpoint(path, enc, clf=None, meta=None):
    """Write the binary checkpoint and a JSON manifest next to it; returns the sha256."""
    path = Path(path)
    data = checkpoint_bytes(enc, clf)
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    manifest = {
        "format": "OSFI1",
        "sha256": digest,
        "mode": enc.mode,
        "input_dim": enc.input_dim,
        "output_dim": enc.output_dim,
        "blocks": len(enc.blocks),
        "classes": None if clf is None else int(clf.C),
        "parameters": parameter_report(enc),
        "meta": meta or {},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ProtocolError(f"cannot read checkpoint {path}: {exc}") from None
    mode = "full"
    mpath = manifest_path(path)
    if mpath.exists():
        mode = json.loads(mpath.read_text()).get("mode", "full")
    enc, clf = checkpoint_from_bytes(data, mode=mode)
    return enc, clf, hashlib.sha256(data).hexdigest()
