"""End-to-end pipeline: pretrain, enroll a gallery, fine-tune, evaluate.

Every function is a pure function of its config and seed, so reruns give
identical numbers. The CLI and the scripts in ``scripts/`` are thin wrappers
around these.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .encoder import (EncoderConfig, MLPEncoder, TrainConfig, embed, finetune,
                      parameter_report, set_finetune_mode)
from .errors import ConfigurationError
from .evaluation import (REPORT_FARS, cluster_metrics, dir_curve, dir_report,
                         histogram_overlap, score_histograms)
from .geometry import PrototypeSet, build_prototypes, l2_normalize
from .head import (LinearProbeConfig, init_linear_probe, init_random,
                   init_weight_imprint)
from .matcher import MatcherConfig, score_batch
from .protocol import SyntheticConfig, generate_synthetic, make_split

INITS = ("random", "linprobe", "wi")
# "bn" is the short CLI spelling of the encoder's "bn_only" regime.
MODE_ALIASES = {"none": "none", "full": "full", "partial": "partial",
                "adapter": "adapter", "bn": "bn_only", "bn_only": "bn_only"}
K_GRID = (2, 4, 8, 16, 32, 128, 256, 512, 1024)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale benchmark settings.

    ``finetune_epochs`` is sized for step count rather than epoch count: a
    150-sample gallery gives two Adam steps per epoch, so 420 epochs match the
    840 steps of 20 epochs over a ~5k-image gallery.
    """

    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_target: float = 0.99
    finetune_epochs: int = 420
    finetune_lr: float | None = None
    batch_size: int = 128
    m: int = 3
    k: int = 16
    seed: int = 0

    def with_seed(self, seed):
        return replace(self, seed=seed, data=replace(self.data, seed=seed),
                       encoder=replace(self.encoder, seed=seed))

    def as_dict(self):
        return asdict(self)


def resolve_mode(mode):
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ConfigurationError(f"unknown fine-tuning mode {mode!r}") from None


def pretrain(data, cfg=ExperimentConfig()):
    """Train a fresh encoder and CosFace head on the pretraining identities."""
    enc = MLPEncoder.create(cfg.encoder)
    classes = np.unique(data.labels)
    clf = init_random(len(classes), enc.output_dim, cfg.seed, labels=classes)
    train = TrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size,
                        learning_rate=cfg.pretrain_lr, seed=cfg.seed)
    result = finetune(enc, clf, data.x, data.labels, train, mode="full",
                      stop_accuracy=cfg.pretrain_target)
    return enc, clf, result


def init_classifier(enc, split, init, seed=0, probe_cfg=None):
    """Classifier over the gallery identities, built on frozen gallery features."""
    feats = embed(enc, split.gallery.x)
    if init == "wi":
        return init_weight_imprint(feats, split.gallery.labels, split.classes), None
    if init == "random":
        return init_random(split.C, enc.output_dim, seed, labels=split.classes), None
    if init == "linprobe":
        probe_cfg = probe_cfg or LinearProbeConfig(seed=seed)
        res = init_linear_probe(feats, split.gallery.labels, split.classes, probe_cfg)
        return res.classifier, res
    raise ConfigurationError(f"unknown classifier init {init!r}; choose from {INITS}")


def adapt(enc, split, init="wi", mode="bn", cfg=ExperimentConfig(), epochs=None, lr=None):
    """Apply a classifier init, then fine-tune a copy of ``enc`` on the gallery.

    Mode ``none`` returns an untouched copy (the pretrained baseline).
    Returns ``(encoder, classifier, info)``.
    """
    mode = resolve_mode(mode)
    enc = enc.copy()
    clf, probe = init_classifier(enc, split, init, cfg.seed)
    info = {"init": init, "mode": mode}
    if probe is not None:
        info["linprobe"] = {"converged": probe.converged, "epochs": probe.epochs,
                            "accuracy": probe.accuracy}
    if mode == "none":
        info["parameters"] = parameter_report(enc)
        return enc, clf, info
    train = TrainConfig(epochs=cfg.finetune_epochs if epochs is None else epochs,
                        batch_size=cfg.batch_size,
                        learning_rate=cfg.finetune_lr if lr is None else lr, seed=cfg.seed)
    info["parameters"] = set_finetune_mode(enc, mode)
    result = finetune(enc, clf, split.gallery.x, split.gallery.labels, train)
    info["train"] = {"epochs": result.epochs, "steps": result.steps,
                     "final_loss": result.losses[-1] if result.losses else None}
    return enc, clf, info


def score_split(enc, split, matcher):
    protos = build_prototypes(embed(enc, split.gallery.x), split.gallery.labels)
    x, labels, is_known = split.probes()
    return score_batch(embed(enc, x), labels, is_known, protos, matcher), protos


def evaluate(enc, split, matcher=MatcherConfig(), fars=REPORT_FARS, bins=64):
    """DIR@FAR, AUC, histograms and gallery cluster metrics for one encoder."""
    table, protos = score_split(enc, split, matcher)
    curve = dir_curve(table)
    edges, known, unknown = score_histograms(table, bins, minmax=True)
    cm = cluster_metrics(embed(enc, split.gallery.x), split.gallery.labels, protos)
    return {
        "table": table,
        "curve": curve,
        "histograms": (edges, known, unknown),
        "auc": curve.auc,
        "dir_at_far": dir_report(table, fars),
        "closed_set_accuracy": table.closed_set_accuracy(),
        "overlap": histogram_overlap(known, unknown),
        "intra_deg": cm.intra_deg,
        "inter_deg": cm.inter_deg,
        "dbi": cm.dbi,
    }


def build_benchmark(cfg=ExperimentConfig()):
    """Synthetic data, pretrained encoder and the default split."""
    pre, ev = generate_synthetic(cfg.data)
    enc, _, result = pretrain(pre, cfg)
    split = make_split(ev, cfg.m, cfg.seed, gallery_pool=cfg.data.gallery_pool)
    return enc, split, result


def compare_inits(enc, split, cfg=ExperimentConfig(), matcher=MatcherConfig("cosine"),
                  arms=(("wi", "none"), ("random", "full"), ("wi", "bn"))):
    """AUC per (init, mode) arm on the same split; mode none is the pretrained encoder."""
    out = {}
    for init, mode in arms:
        tuned, _, _ = adapt(enc, split, init, mode, cfg)
        out[f"{init}+{mode}"] = evaluate(tuned, split, matcher)["auc"]
    return out


def classifier_geometry(enc, split, clf):
    """Cluster metrics of frozen gallery features around the classifier rows."""
    feats = embed(enc, split.gallery.x)
    rows = PrototypeSet(l2_normalize(clf.weight), np.asarray(clf.labels))
    return cluster_metrics(feats, split.gallery.labels, rows)


def k_grid(C, grid=K_GRID):
    """Grid entries clamped to C and deduplicated, with C itself appended."""
    return sorted({min(int(k), C) for k in grid} | {C})


def sweep_k(enc, split, grid=K_GRID):
    """``[(k, auc)]`` with a leading ``("cos", auc)`` baseline row."""
    rows = [("cos", score_auc(enc, split, MatcherConfig("cosine")))]
    for k in k_grid(split.C, grid):
        rows.append((k, score_auc(enc, split, MatcherConfig("nac", k))))
    return rows


def score_auc(enc, split, matcher):
    return dir_curve(score_split(enc, split, matcher)[0]).auc


def gallery_sweep(enc, evaluation, ms=(1, 2, 3, 4, 5), cfg=ExperimentConfig()):
    """``[(m, baseline_auc, proposed_auc)]``: pretrained+cosine vs WI+BN+NAC."""
    rows = []
    for m in ms:
        split = make_split(evaluation, m, cfg.seed, gallery_pool=cfg.data.gallery_pool)
        base = score_auc(enc, split, MatcherConfig("cosine"))
        tuned, _, _ = adapt(enc, split, "wi", "bn", cfg)
        rows.append((m, base, score_auc(tuned, split, MatcherConfig("nac", cfg.k))))
    return rows

