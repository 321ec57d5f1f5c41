"""Training objectives with exact gradients.

* critic: WGAN loss with gradient penalty on random interpolates
* classifier: cross-entropy of generated images against their conditioning labels
* encoder: squared reconstruction error of ``G(E(x))`` against ``x``
* generator: adversarial + weighted classifier + weighted reconstruction terms,
  with the gradient of each term wrt the generated images kept separate so
  that the sanitizer can clip them independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (
    ClassifierNet,
    DiscriminatorNet,
    EncoderNet,
    GeneratorCache,
    GeneratorNet,
    ModelBundle,
    NoiseConfig,
    classifier_backward,
    classifier_forward,
    discriminator_backward,
    discriminator_forward,
    encoder_backward,
    encoder_forward,
    generator_backward,
    generator_forward,
)
from .numeric import InvalidParameterError, ParamVector, RngStream, softmax_cross_entropy

SOURCES = ("d", "c", "e")


@dataclass(frozen=True)
class LossWeights:
    lambda_gp: float = 10.0
    lambda_c: float = 1.0
    gamma_recon: float = 1.0

    def __post_init__(self):
        for name in ("lambda_gp", "lambda_c", "gamma_recon"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")


def gradient_penalty(d: DiscriminatorNet, interpolates: np.ndarray, weight: float):
    """``weight * mean((|grad_x D(x_hat)| - 1)^2)`` and its gradient wrt the critic params.

    The critic is ``w2 . tanh(W1 x + b1) + b2``, so ``grad_x D = W1 (w2 * (1 - h^2))``
    and the parameter gradient follows by differentiating that expression once more.
    """
    p = d.params
    W1, b1, w2 = p["W1"], p["b1"], p["w2"]
    xh = interpolates.reshape(interpolates.shape[0], -1)
    n = xh.shape[0]
    h = np.tanh(xh @ W1 + b1)
    s = 1.0 - h * h
    u = s * w2
    gx = u @ W1.T
    norms = np.sqrt(np.sum(gx * gx, axis=1))
    value = weight * float(np.mean((norms - 1.0) ** 2))

    safe = np.where(norms > 0, norms, 1.0)
    # the norm is not differentiable at 0; use the zero subgradient there
    coef = np.where(norms > 0, 2.0 * weight * (norms - 1.0) / (n * safe), 0.0)
    r = coef[:, None] * gx
    grads = p.zeros_like()
    du = r @ W1
    ds = du * w2
    da = -2.0 * h * ds * s
    grads["W1"][...] = r.T @ u + xh.T @ da
    grads["b1"][...] = da.sum(axis=0)
    grads["w2"][...] = np.sum(du * s, axis=0)
    return value, grads, norms


def loss_discriminator(d: DiscriminatorNet, real_batch, fake_batch, weights: LossWeights,
                       rng: RngStream | None = None, alpha=None):
    """Critic loss ``-mean D(x) + mean D(x_fake) + lambda * GP`` and its parameter gradient.

    ``alpha`` (one interpolation factor per sample) is drawn from ``rng`` unless given.
    """
    real = np.asarray(real_batch, dtype=np.float64)
    fake = np.asarray(fake_batch, dtype=np.float64)
    b = real.shape[0]
    if b == 0:
        raise InvalidParameterError("batch size must be >= 1")
    if fake.shape != real.shape:
        raise InvalidParameterError(f"real {real.shape} and fake {fake.shape} batches differ in shape")
    if alpha is None:
        alpha = rng.uniform((b,))
    alpha = np.asarray(alpha, dtype=np.float64).reshape((b,) + (1,) * (real.ndim - 1))

    out_r, cache_r = discriminator_forward(d, real)
    out_f, cache_f = discriminator_forward(d, fake)
    g_r, _ = discriminator_backward(cache_r, np.full(b, -1.0 / b))
    g_f, _ = discriminator_backward(cache_f, np.full(b, 1.0 / b))
    gp, g_gp, _ = gradient_penalty(d, alpha * real + (1.0 - alpha) * fake, weights.lambda_gp)
    loss = -float(out_r.mean()) + float(out_f.mean()) + gp
    grads = d.params.with_data(g_r.data + g_f.data + g_gp.data)
    return loss, grads


def classifier_loss_on_images(c: ClassifierNet, images, labels):
    """Cross-entropy of ``c`` on ``images``; returns ``(loss, grad_params, grad_images)``."""
    logits, cache = classifier_forward(c, images)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, dimages = classifier_backward(cache, dlogits)
    return loss, grads, dimages


def loss_classifier(c: ClassifierNet, g: GeneratorNet, z_batch, y_batch, cfg: NoiseConfig, rng: RngStream):
    """Classifier loss on generated samples ``G(z, y)`` labelled ``y``.

    Returns ``(loss, grad wrt classifier params, grad wrt generated images)``.
    """
    y = np.asarray(y_batch, dtype=np.int64)
    if len(y) != len(z_batch):
        raise InvalidParameterError("z_batch and y_batch differ in length")
    if np.any(y < 0) or np.any(y >= c.n_classes):
        raise InvalidParameterError(f"label out of range [0, {c.n_classes})")
    images, _ = generator_forward(g, z_batch, y, cfg, rng)
    return classifier_loss_on_images(c, images, y)


def reconstruction_on_images(recon, x):
    """``mean_b |recon_b - x_b|^2`` and its gradient wrt ``recon``."""
    diff = recon - x
    b = diff.shape[0]
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


def loss_reconstruction(e: EncoderNet, g: GeneratorNet, x_batch, cfg: NoiseConfig, rng: RngStream,
                        labels=None):
    """Mean squared reconstruction error of ``G(E(x))``.

    Returns ``(loss, grad wrt encoder params, grad wrt reconstructed images)``.
    ``labels`` conditions the generator; ``None`` uses the unconditional path.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidParameterError("x_batch is empty")
    code, e_cache = encoder_forward(e, x)
    recon, g_cache = generator_forward(g, code, labels, cfg, rng)
    if recon.shape != x.shape:
        raise InvalidParameterError(f"reconstruction shape {recon.shape} != input shape {x.shape}")
    loss, drecon = reconstruction_on_images(recon, x)
    _, dcode = generator_backward(g_cache, drecon)
    grads, _ = encoder_backward(e_cache, dcode)
    return loss, grads, drecon


@dataclass
class GeneratorLoss:
    """Generator objective evaluated on the stacked batch ``[G(z, y); G(E(x), y_x)]``.

    ``grads[s]`` is the gradient of the (weighted) term ``s`` wrt ``images``;
    the first ``B`` rows belong to the sampled latents, the last ``B`` to the
    reconstructions.
    """

    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]
    images: np.ndarray
    cache: GeneratorCache
    batch: int


def generator_terms(d: DiscriminatorNet, c: ClassifierNet, images, y_batch, x_batch, weights: LossWeights):
    """Loss terms and per-source image gradients for an already generated stacked batch."""
    x = np.asarray(x_batch, dtype=np.float64)
    b = x.shape[0]
    fake, recon = images[:b], images[b:]
    out, d_cache = discriminator_forward(d, fake)
    _, d_img = discriminator_backward(d_cache, np.full(b, -1.0 / b))
    l_c, _, c_img = classifier_loss_on_images(c, fake, y_batch)
    l_en, e_img = reconstruction_on_images(recon, x)

    zeros = np.zeros_like(fake)
    grads = {
        "d": np.concatenate([d_img, zeros]),
        "c": np.concatenate([weights.lambda_c * c_img, zeros]),
        "e": np.concatenate([zeros, weights.gamma_recon * e_img]),
    }
    terms = {"d": -float(out.mean()), "c": l_c, "e": l_en}
    total = terms["d"] + weights.lambda_c * l_c + weights.gamma_recon * l_en
    return total, terms, grads


def loss_generator(bundle: ModelBundle, d: DiscriminatorNet, z_batch, y_batch, x_batch, x_labels,
                   weights: LossWeights, cfg: NoiseConfig, rng: RngStream) -> GeneratorLoss:
    """``-mean D(G(z)) + lambda_c * L_C + gamma_recon * L_En`` with per-source image gradients.

    ``d`` is the critic selected for this iteration.  The gradients are not
    combined here; see :func:`efdp_gan.sanitizer.sanitize_hook`.
    """
    z = np.asarray(z_batch, dtype=np.float64)
    x = np.asarray(x_batch, dtype=np.float64)
    if len(z) != len(x) or len(z) != len(y_batch) or len(x) != len(x_labels):
        raise InvalidParameterError("z, y, x and x_labels batches must be aligned")
    code, _ = encoder_forward(bundle.encoder, x)
    latents = np.concatenate([z, code])
    labels = np.concatenate([np.asarray(y_batch, dtype=np.int64), np.asarray(x_labels, dtype=np.int64)])
    images, cache = generator_forward(bundle.generator, latents, labels, cfg, rng)
    total, terms, grads = generator_terms(d, bundle.classifier, images, y_batch, x, weights)
    return GeneratorLoss(total, terms, grads, images, cache, len(z))


def generator_param_grad(result: GeneratorLoss, image_grad) -> ParamVector:
    """Back-propagate a (possibly sanitized) image gradient to the generator parameters."""
    grads, _ = generator_backward(result.cache, image_grad)
    return grads
