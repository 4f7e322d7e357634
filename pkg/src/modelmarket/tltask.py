"""Desk-scale surrogate for the transfer-learning loop.

Source and target tasks are two-class Gaussian blobs in a shared feature
space, with the target means shifted off the source means. Sellers
pretrain a small classifier on (possibly label-poisoned) source data;
buyers fine-tune the bought parameters on a handful of target samples and
rate the trade by held-out target accuracy. Everything is seeded and
deterministic; one run takes milliseconds, which is the point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels, nn


@dataclass(frozen=True)
class SyntheticTaskSpec:
    feature_dim: int = 2
    class_sep: float = 2.4          # distance between the two class means
    noise: float = 0.9              # isotropic standard deviation
    domain_shift: float = 0.8       # distance between source and target means
    source_samples: int = 200
    target_train_samples: int = 8
    target_test_samples: int = 200

    def __post_init__(self):
        if min(self.source_samples, self.target_train_samples,
               self.target_test_samples) <= 0:
            raise ValueError("sample counts must be positive")
        if self.noise <= 0:
            raise ValueError("noise scale must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")


@dataclass(frozen=True)
class AttackConfig:
    strength: float = 0.0   # fraction of source labels flipped

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("attack strength must lie in [0,1]")


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray    # (n, d)
    y: np.ndarray    # (n,) in {0, 1}

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class Classifier:
    net: nn.DenseNet
    epochs: int = 150
    learning_rate: float = 0.05


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    sample_count: int
    seed: int


def _class_means(spec: SyntheticTaskSpec, shifted: bool) -> np.ndarray:
    d = spec.feature_dim
    axis = np.zeros(d)
    axis[0] = 1.0
    if d > 1:
        axis[1] = 1.0
        axis /= math.sqrt(2.0)
    means = np.stack([-0.5 * spec.class_sep * axis, 0.5 * spec.class_sep * axis])
    if shifted:
        shift = np.zeros(d)
        if d > 1:
            shift[0], shift[1] = 1.0, -1.0
            shift /= math.sqrt(2.0)
        else:
            shift[0] = 1.0
        means = means + spec.domain_shift * shift
    return means


def _draw(spec: SyntheticTaskSpec, n: int, shifted: bool,
          rng: np.random.Generator) -> Dataset:
    means = _class_means(spec, shifted)
    y = rng.integers(0, 2, size=n)
    x = means[y] + rng.normal(scale=spec.noise, size=(n, spec.feature_dim))
    return Dataset(x, y.astype(np.int64))


def gen_task(spec: SyntheticTaskSpec, seed: int):
    """(source, target_train, target_test) datasets, deterministic per seed."""
    root = np.random.SeedSequence(seed)
    src_ss, ttr_ss, tte_ss = root.spawn(3)
    source = _draw(spec, spec.source_samples, False, np.random.default_rng(src_ss))
    target_train = _draw(spec, spec.target_train_samples, True,
                         np.random.default_rng(ttr_ss))
    target_test = _draw(spec, spec.target_test_samples, True,
                        np.random.default_rng(tte_ss))
    return source, target_train, target_test


def flip_labels(data: Dataset, attack: AttackConfig, rng: np.random.Generator) -> Dataset:
    """Flip exactly floor(strength * n) labels, positions drawn uniformly."""
    n = len(data)
    k = int(math.floor(attack.strength * n))
    if k == 0:
        return Dataset(data.x, data.y.copy())
    idx = rng.permutation(n)[:k]
    y = data.y.copy()
    y[idx] = 1 - y[idx]
    return Dataset(data.x, y)


def _train(net: nn.DenseNet, data: Dataset, epochs: int, lr: float) -> nn.DenseNet:
    """Full-batch softmax cross-entropy training with Adam."""
    params = nn.net_params(net)
    opt = nn.make_adam(lr)
    x = np.ascontiguousarray(data.x, dtype=np.float64)
    onehot = np.eye(2)[data.y]
    inv_n = 1.0 / len(data)
    for _ in range(epochs):
        logits, cache = nn.forward_cache(net, x)
        probs = kernels.slot_softmax(
            np.ascontiguousarray(logits[:, None, :]))[:, 0, :]
        grad = (probs - onehot) * inv_n
        pg, _ = nn.backward(net, cache, grad)
        params, opt = nn.optim_step(params, nn.flat_param_grads(pg), opt)
        net = nn.with_params(net, params)
    return net


def train_classifier(data: Dataset, seed: int, *, hidden: int = 8,
                     epochs: int = 150, lr: float = 0.05) -> Classifier:
    """Fresh classifier trained on `data` (also the from-scratch baseline)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    net = nn.init_net([data.x.shape[1], hidden, 2], rng=rng)
    return Classifier(_train(net, data, epochs, lr), epochs, lr)


def pretrain(source: Dataset, attack: AttackConfig, seed: int, *,
             hidden: int = 8, epochs: int = 150, lr: float = 0.05) -> Classifier:
    """Seller-side training on the (poisoned) source set."""
    root = np.random.SeedSequence(seed)
    flip_ss, init_ss = root.spawn(2)
    poisoned = flip_labels(source, attack, np.random.default_rng(flip_ss))
    net = nn.init_net([source.x.shape[1], hidden, 2],
                      rng=np.random.default_rng(init_ss))
    return Classifier(_train(net, poisoned, epochs, lr), epochs, lr)


def fine_tune(source_model: Classifier, target_train: Dataset, epochs: int,
              seed: int, *, lr: float = 0.01) -> Classifier:
    """Continue training the bought parameters on target data (whole-model
    weight initialization). The step size is deliberately gentler than
    pretraining so the source knowledge anchors the result; full-batch
    updates make the seed a formality."""
    if target_train.x.shape[1] != source_model.net.input_dim:
        raise ValueError(
            f"target feature dim {target_train.x.shape[1]} does not match "
            f"model input dim {source_model.net.input_dim}")
    if epochs == 0:
        return replace(source_model, epochs=0)
    tuned = _train(source_model.net, target_train, epochs, lr)
    return replace(source_model, net=tuned, epochs=epochs, learning_rate=lr)


def predict(model: Classifier, x: np.ndarray) -> np.ndarray:
    logits = nn.forward(model.net, x)
    return logits.argmax(axis=-1)


def evaluate(model: Classifier, test: Dataset, *, seed: int = 0) -> EvalReport:
    """Exact accuracy on a held-out set."""
    if len(test) == 0:
        raise ValueError("evaluation needs a nonempty test set")
    correct = int((predict(model, test.x) == test.y).sum())
    return EvalReport(accuracy=correct / len(test), sample_count=len(test),
                      seed=seed)


def rate_outcome(report: EvalReport, threshold: float) -> str:
    """positive iff accuracy clears the threshold (boundary inclusive)."""
    return "positive" if report.accuracy >= threshold else "negative"
