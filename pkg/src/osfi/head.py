"""C-way cosine classifier over encoder features.

Rows of the weight matrix act as class centers. They are stored unnormalized
and normalized inside every logit computation, so optimizer state stays
well-defined while the loss only sees directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ProtocolError
from .geometry import class_means, l2_normalize
from .optim import AdamState, adam_step


@dataclass
class Classifier:
    weight: np.ndarray
    labels: np.ndarray

    @property
    def C(self):
        return self.weight.shape[0]

    def copy(self):
        return Classifier(self.weight.copy(), self.labels.copy())

    def targets(self, labels):
        """Map identity labels to row indices."""
        lookup = {int(c): j for j, c in enumerate(self.labels)}
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ProtocolError(f"identity {exc.args[0]} has no classifier row") from None


@dataclass(frozen=True)
class CosFaceConfig:
    scale: float = 32.0
    margin: float = 0.4

    def __post_init__(self):
        if self.scale <= 0 or not 0 <= self.margin < 1:
            raise ValueError("CosFace needs scale > 0 and 0 <= margin < 1")


def init_random(C, d, seed, labels=None):
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(C, d))
    return Classifier(W, np.arange(C) if labels is None else np.asarray(labels))


def init_weight_imprint(features, labels, classes=None):
    W, classes = class_means(features, labels, classes)
    return Classifier(W, classes)


def softmax_ce_loss(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    B = len(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(log_z - shifted[rows, targets]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, targets] -= 1.0
    return loss, grad / B


def _unit(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm {what}")
    return x / norms, norms


def _normalize_backward(grad_unit, unit, norms):
    return (grad_unit - unit * np.sum(grad_unit * unit, axis=1, keepdims=True)) / norms


def cosface_loss(features, targets, W, cfg=CosFaceConfig()):
    """Large-margin cosine loss.

    Logits are ``s * (cos - m)`` for the target class and ``s * cos``
    elsewhere. Returns ``(loss, d_features, d_W)``.
    """
    features = np.atleast_2d(features)
    targets = np.asarray(targets)
    if targets.max(initial=-1) >= W.shape[0] or targets.min(initial=0) < 0:
        raise ProtocolError("target index out of range")
    f_hat, f_norm = _unit(features, "feature")
    w_hat, w_norm = _unit(W, "classifier row")
    cos = f_hat @ w_hat.T
    logits = cfg.scale * cos
    logits[np.arange(len(cos)), targets] -= cfg.scale * cfg.margin
    loss, d_logits = softmax_ce_loss(logits, targets)
    d_cos = cfg.scale * d_logits
    d_f = _normalize_backward(d_cos @ w_hat, f_hat, f_norm)
    d_W = _normalize_backward(d_cos.T @ f_hat, w_hat, w_norm)
    return loss, d_f, d_W


def predict(features, clf):
    """Row index of the most similar classifier row for each feature."""
    w_hat, _ = _unit(clf.weight, "classifier row")
    return np.argmax(l2_normalize(features) @ w_hat.T, axis=1)


@dataclass(frozen=True)
class LinearProbeConfig:
    lr: float = 1e-2
    max_epochs: int = 500
    target_accuracy: float = 0.95
    batch_size: int = 128
    seed: int = 0
    loss: CosFaceConfig = CosFaceConfig()


@dataclass
class LinearProbeResult:
    classifier: Classifier
    converged: bool
    epochs: int
    accuracy: float


def init_linear_probe(features, labels, classes, cfg=LinearProbeConfig()):
    """Train only the classifier on frozen features, from a random start.

    Stops once training accuracy reaches the target; hitting the epoch cap
    returns the current weights with ``converged=False``.
    """
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes)
    clf = init_random(len(classes), features.shape[1], cfg.seed, labels=classes)
    targets = clf.targets(labels)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(features)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = max(cfg.max_epochs * steps_per_epoch, 1)
    params = {"W": clf.weight}
    state = AdamState()
    acc = float(np.mean(predict(features, clf) == targets))
    epoch = 0
    while acc < cfg.target_accuracy and epoch < cfg.max_epochs:
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            _, _, d_W = cosface_loss(features[idx], targets[idx], params["W"], cfg.loss)
            adam_step(params, {"W": d_W}, state, cfg.lr, epoch * steps_per_epoch + b, total)
        epoch += 1
        acc = float(np.mean(predict(features, clf) == targets))
    return LinearProbeResult(clf, acc >= cfg.target_accuracy, epoch, acc)
