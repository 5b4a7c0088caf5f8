"""Downstream evaluation: linear probe, full finetuning, supervised from scratch.

Probes use the encoder body output; the projection head is never on the
classification path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import models, optim
from .data import Dataset
from .errors import InvalidConfig
from .models import EncoderConfig, ModelParams

PROTOCOLS = ("linear", "finetune", "scratch")


@dataclass(frozen=True)
class ProbeConfig:
    protocol: str = "linear"
    labeled_fraction: float = 0.1
    steps: int = 300
    optimizer: str = "adam"
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InvalidConfig(f"protocol must be one of {PROTOCOLS}", "protocol")
        if not 0 < self.labeled_fraction <= 1:
            raise InvalidConfig("labeled_fraction must be in (0, 1]", "labeled_fraction")
        if self.steps < 0:
            raise InvalidConfig("steps must be >= 0", "steps")
        if self.optimizer not in optim.KINDS:
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}", "optimizer")
        if self.lr < 0:
            raise InvalidConfig("lr must be >= 0", "lr")


@dataclass
class EvalReport:
    accuracy: float
    loss_curve: list[float]
    config: dict
    num_train: int = 0
    num_test: int = 0
    feature_dim: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def _optimizer(config: ProbeConfig) -> optim.OptimizerState:
    return optim.make_optimizer(config.optimizer, momentum=config.momentum,
                                weight_decay=config.weight_decay)


def init_classifier(in_dim: int, num_classes: int, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 0xC1A5])
    return ModelParams({
        "clf/w": rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, num_classes)),
        "clf/b": np.zeros(num_classes),
    })


def softmax_cross_entropy(logits: ad.Node, labels: np.ndarray) -> ad.Node:
    g = logits.graph
    n, k = logits.shape
    # Subtracting the row max is a constant shift; it leaves the gradient alone.
    shifted = logits - g.constant(np.max(logits.value, axis=1, keepdims=True))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    log_norm = ad.log(ad.sum(ad.exp(shifted), axis=1))
    return ad.mean(log_norm - ad.sum(shifted * g.constant(onehot), axis=1))


def _logits(g, clf_nodes, features):
    return features @ clf_nodes["clf/w"] + clf_nodes["clf/b"]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _batches(n, config, rng):
    if config.batch_size is None or config.batch_size >= n:
        return None
    return rng.choice(n, size=config.batch_size, replace=False)


def _check_labeled(labeled: Dataset, test: Dataset):
    if labeled.labels is None or test.labels is None:
        raise InvalidConfig("probe datasets need labels", "labels")


def linear_eval(encoder: ModelParams, labeled: Dataset, test: Dataset, config: ProbeConfig) -> EvalReport:
    """Train a softmax classifier on frozen encoder features."""
    _check_labeled(labeled, test)
    train_x = models.embed_values(encoder, labeled.features)
    test_x = models.embed_values(encoder, test.features)
    clf = init_classifier(train_x.shape[1], labeled.num_classes, config.seed)
    state = _optimizer(config)
    rng = np.random.default_rng([config.seed, 0xBA7C])
    curve = []
    for step in range(config.steps):
        idx = _batches(len(labeled), config, rng)
        xb = train_x if idx is None else train_x[idx]
        yb = labeled.labels if idx is None else labeled.labels[idx]
        g = ad.Graph()
        nodes = {k: g.param(k, v) for k, v in clf.items()}
        loss = softmax_cross_entropy(_logits(g, nodes, g.constant(xb)), yb)
        grads = g.backward(loss)
        curve.append(float(loss.value))
        lr = optim.cosine_lr(config.lr, step, config.steps)
        state, clf = optim.apply(state, clf, {k: grads[n] for k, n in nodes.items()}, lr)
    logits = test_x @ clf["clf/w"] + clf["clf/b"]
    return EvalReport(_accuracy(logits, test.labels), curve, asdict(config),
                      len(labeled), len(test), train_x.shape[1])


def _train_jointly(encoder: ModelParams, labeled: Dataset, test: Dataset,
                   config: ProbeConfig) -> EvalReport:
    _check_labeled(labeled, test)
    clf = init_classifier(encoder.config.feature_dim, labeled.num_classes, config.seed)
    body_names = [k for k in encoder if not k.startswith("proj")]
    body = ModelParams(((k, encoder[k]) for k in body_names), encoder.config)
    params = ModelParams({**body, **clf}, encoder.config)
    state = _optimizer(config)
    rng = np.random.default_rng([config.seed, 0xBA7C])
    curve = []
    for step in range(config.steps):
        idx = _batches(len(labeled), config, rng)
        xb = labeled.features if idx is None else labeled.features[idx]
        yb = labeled.labels if idx is None else labeled.labels[idx]
        g = ad.Graph()
        nodes = models.bind_params(g, params)
        feats = models.embed(nodes, xb, g)
        loss = softmax_cross_entropy(_logits(g, nodes, feats), yb)
        grads = g.backward(loss)
        curve.append(float(loss.value))
        lr = optim.cosine_lr(config.lr, step, config.steps)
        state, params = optim.apply(state, params, {k: grads[n] for k, n in nodes.items()}, lr)
    feats = models.embed_values(params, test.features)
    logits = feats @ params["clf/w"] + params["clf/b"]
    return EvalReport(_accuracy(logits, test.labels), curve, asdict(config),
                      len(labeled), len(test), feats.shape[1])


def finetune(encoder: ModelParams, labeled: Dataset, test: Dataset, config: ProbeConfig) -> EvalReport:
    """Train classifier and encoder body together, starting from ``encoder``."""
    return _train_jointly(encoder, labeled, test, config)


def scratch_baseline(encoder_config: EncoderConfig, labeled: Dataset, test: Dataset,
                     config: ProbeConfig) -> EvalReport:
    """Same architecture from random init, trained on the labeled data only."""
    encoder = models.init_params(encoder_config, config.seed)
    return _train_jointly(encoder, labeled, test, config)
