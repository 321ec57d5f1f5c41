"""Fréchet distance, inception-style score and gen2real utility with locally trained networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .losses import classifier_loss_on_images
from .models import (
    ClassifierNet,
    ConvArch,
    ConvClassifier,
    GeneratorNet,
    NoiseConfig,
    classifier_features,
    classifier_forward,
    conv_classifier_backward,
    conv_classifier_forward,
    generator_forward,
)
from .numeric import InvalidParameterError, NumericError, RngStream, softmax, softmax_cross_entropy

FEATURE_CLASSIFIER_SEED = 20240517
FEATURE_CLASSIFIER_HIDDEN = (64, 32)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise InvalidParameterError("covariance shape does not match mean")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-10:
            raise NumericError("covariance is not symmetric")
        if self.mean.size and np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise NumericError("covariance is not positive semidefinite")


def feature_stats(samples, extractor: str | Callable = "raw_pixels", classifier: ClassifierNet | None = None):
    """Mean and unbiased covariance of extracted features.

    ``extractor`` is ``"raw_pixels"``, ``"classifier_penultimate"`` (needs
    ``classifier``) or any callable mapping samples to an (N, F) array.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise InvalidParameterError("need at least 2 samples")
    if extractor == "raw_pixels":
        feats = samples.reshape(samples.shape[0], -1)
    elif extractor == "classifier_penultimate":
        if classifier is None:
            raise InvalidParameterError("classifier_penultimate needs a classifier")
        feats = classifier_features(classifier, samples)
    elif callable(extractor):
        feats = np.asarray(extractor(samples), dtype=np.float64)
    else:
        raise InvalidParameterError(f"unknown extractor {extractor!r}")
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / (feats.shape[0] - 1)
    return FeatureStats(mean, 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its eigenvalues
    with ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidParameterError(f"feature dims differ: {a.mean.size} vs {b.mean.size}")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if w.size and w.min() < -1e-6:
        raise NumericError(f"covariance product has eigenvalue {w.min():.3g} below tolerance")
    tr_root = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_root)
    return max(fd, 0.0)


def inception_score_from_probs(probs) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))``."""
    p = np.asarray(probs, dtype=np.float64)
    marginal = p.mean(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_style_score(samples, classifier: ClassifierNet) -> float:
    logits, _ = classifier_forward(classifier, samples)
    return inception_score_from_probs(softmax(logits))


# ---------------------------------------------------------------------------
# locally trained classifiers
# ---------------------------------------------------------------------------

def _sgd_train(forward_backward, params, n: int, rng: RngStream, epochs: int, batch: int, lr: float,
               momentum: float = 0.9):
    velocity = np.zeros_like(params.data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            grad = forward_backward(idx)
            velocity = momentum * velocity + grad.data
            params.data -= lr * velocity


def train_mlp_classifier(images, labels, n_classes: int, seed: int, hidden=(64,), epochs: int = 40,
                         batch: int = 32, lr: float = 0.02) -> ClassifierNet:
    rng = RngStream(seed, "mlp-probe")
    images = np.asarray(images, dtype=np.float64)
    net = ClassifierNet.init(int(np.prod(images.shape[1:])), n_classes, rng.spawn("init"), hidden=hidden)

    def step(idx):
        _, grads, _ = classifier_loss_on_images(net, images[idx], labels[idx])
        return grads

    _sgd_train(step, net.params, len(labels), rng, epochs, batch, lr)
    return net


def train_conv_classifier(images, labels, n_classes: int, seed: int, epochs: int = 20, batch: int = 32,
                          lr: float = 0.02) -> ConvClassifier:
    rng = RngStream(seed, "cnn-probe")
    images = np.asarray(images, dtype=np.float64)
    net = ConvClassifier.init(ConvArch(images.shape[1], (8, 8), 3, n_classes), rng.spawn("init"))

    def step(idx):
        logits, cache = conv_classifier_forward(net, images[idx])
        _, dlogits = softmax_cross_entropy(logits, labels[idx])
        grads, _ = conv_classifier_backward(cache, dlogits)
        return grads

    _sgd_train(step, net.params, len(labels), rng, epochs, batch, lr)
    return net


def predict(net, images) -> np.ndarray:
    if isinstance(net, ConvClassifier):
        logits, _ = conv_classifier_forward(net, images)
    else:
        logits, _ = classifier_forward(net, images)
    return np.argmax(logits, axis=1)


def accuracy(net, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(net, dataset.images) == dataset.labels))


def train_feature_classifier(train: LabeledDataset, seed: int = FEATURE_CLASSIFIER_SEED) -> ClassifierNet:
    """Pinned feature extractor for FD / IS; its last hidden layer provides the features."""
    return train_mlp_classifier(train.images, train.labels, train.n_classes, seed,
                                hidden=FEATURE_CLASSIFIER_HIDDEN, epochs=40)


# ---------------------------------------------------------------------------
# gen2real
# ---------------------------------------------------------------------------

Sampler = Callable[[np.ndarray, RngStream], np.ndarray]


def generator_sampler(net: GeneratorNet, noise: NoiseConfig, batch: int = 256) -> Sampler:
    """Wrap a generator as ``sampler(labels, rng) -> images`` with ``z ~ N(0, I)``."""

    def sample(labels, rng):
        labels = np.asarray(labels, dtype=np.int64)
        out = np.empty((len(labels), net.arch.image_size, net.arch.image_size))
        for lo in range(0, len(labels), batch):
            y = labels[lo:lo + batch]
            z = rng.normal((len(y), net.arch.latent_dim))
            out[lo:lo + batch], _ = generator_forward(net, z, y, noise, rng)
        return out

    return sample


def sample_labels(n: int, n_classes: int, rng: RngStream) -> np.ndarray:
    """Labels from the uniform prior over classes."""
    return np.asarray(rng.integers(n_classes, size=n), dtype=np.int64)


def gen2real(sampler: Sampler, n_classes: int, n_synthetic: int, real_test: LabeledDataset,
             probe: str = "mlp", seed: int = 0) -> float:
    """Accuracy on ``real_test`` of a fresh probe trained only on generated samples."""
    rng = RngStream(seed, "gen2real")
    labels = sample_labels(n_synthetic, n_classes, rng.spawn("labels"))
    images = sampler(labels, rng.spawn("images"))
    if probe == "mlp":
        net = train_mlp_classifier(images, labels, n_classes, seed)
    elif probe in ("cnn", "cnn-like"):
        net = train_conv_classifier(images, labels, n_classes, seed)
    else:
        raise InvalidParameterError(f"unknown probe {probe!r}")
    return accuracy(net, real_test)
