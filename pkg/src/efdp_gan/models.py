"""Small fixed networks: conditional generator with noise injection, critic bank,
auxiliary classifier, encoder and the probe classifiers used for evaluation.

Every network keeps its weights in a :class:`ParamVector`.  Forward passes
return ``(output, cache)``; backward passes take that cache and return
gradients as a ParamVector plus the gradient wrt the network input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numeric import (
    ACTIVATIONS,
    InvalidParameterError,
    InvalidStateError,
    ParamVector,
    RngStream,
    affine_backward,
    affine_forward,
    conv_backward,
    conv_forward,
    softmax,
    tanh_backward,
    upsample2x_backward,
    upsample2x_forward,
)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_noise: float = 0.1

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise InvalidParameterError("sigma_noise must be >= 0")


def inject_noise(feature_map: np.ndarray, cfg: NoiseConfig, rng: RngStream | None) -> np.ndarray:
    """Return ``feature_map + N(0, sigma_noise^2)`` drawn per element; the input is not modified."""
    if cfg.sigma_noise == 0:
        return feature_map.copy()
    return feature_map + rng.normal(feature_map.shape, 0.0, cfg.sigma_noise)


def _init(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, 0.0, 1.0 / np.sqrt(max(fan_in, 1)))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorArch:
    latent_dim: int = 16
    n_classes: int = 2
    embed_dim: int = 4
    base_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 8)
    kernel: int = 3
    image_size: int = 8
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.image_size not in (8, 16):
            raise InvalidParameterError("image_size must be 8 or 16")
        if self.image_size % (2 ** len(self.stage_channels)):
            raise InvalidParameterError("image_size not divisible by 2**stages")
        if self.kernel % 2 != 1:
            raise InvalidParameterError("kernel must be odd")
        if max((self.base_channels,) + self.stage_channels) > 32:
            raise InvalidParameterError("channel width above 32")
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation}")

    @property
    def base_size(self) -> int:
        return self.image_size // 2 ** len(self.stage_channels)

    def segments(self):
        s0 = self.base_size
        segs = [
            ("embed", (self.n_classes, self.embed_dim)),
            ("fc_W", (self.latent_dim + self.embed_dim, self.base_channels * s0 * s0)),
            ("fc_b", (self.base_channels * s0 * s0,)),
        ]
        prev = self.base_channels
        for i, c in enumerate(self.stage_channels):
            segs += [(f"s{i}_W", (c, prev, self.kernel, self.kernel)), (f"s{i}_b", (c,))]
            prev = c
        segs += [("out_W", (1, prev, 1, 1)), ("out_b", (1,))]
        return segs


@dataclass
class GeneratorNet:
    arch: GeneratorArch
    params: ParamVector

    @classmethod
    def init(cls, arch: GeneratorArch, rng: RngStream) -> "GeneratorNet":
        p = ParamVector(arch.segments())
        p["embed"][...] = rng.normal(p["embed"].shape)
        p["fc_W"][...] = _init(rng, p["fc_W"].shape, p["fc_W"].shape[0])
        for i, _ in enumerate(arch.stage_channels):
            w = p[f"s{i}_W"]
            w[...] = _init(rng, w.shape, int(np.prod(w.shape[1:])))
        p["out_W"][...] = _init(rng, p["out_W"].shape, p["out_W"].shape[1])
        return cls(arch, p)

    @property
    def n_injection_points(self) -> int:
        return len(self.arch.stage_channels)


@dataclass
class GeneratorCache:
    net: GeneratorNet
    snapshot: np.ndarray
    labels: np.ndarray | None
    h0: np.ndarray
    a0: np.ndarray
    stages: list = field(default_factory=list)
    last: np.ndarray | None = None
    image: np.ndarray | None = None


def _check_latent(arch: GeneratorArch, z, y):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise InvalidParameterError(f"z must have shape (B, {arch.latent_dim}), got {z.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (z.shape[0],):
            raise InvalidParameterError("need exactly one label per latent row")
        if np.any(y < 0) or np.any(y >= arch.n_classes):
            raise InvalidParameterError(f"label out of range [0, {arch.n_classes})")
    return z, y


def generator_forward(net: GeneratorNet, z, y, cfg: NoiseConfig, rng: RngStream | None):
    """Images of shape (B, H, W) in [-1, 1] plus the backward cache.

    ``y=None`` runs the unconditional path (zero label embedding).  Injection
    noise is added after each stage's convolution and before its activation.
    """
    arch, p = net.arch, net.params
    z, y = _check_latent(arch, z, y)
    n = z.shape[0]
    emb = p["embed"][y] if y is not None else np.zeros((n, arch.embed_dim))
    h0 = np.concatenate([z, emb], axis=1)
    a0 = affine_forward(h0, p["fc_W"], p["fc_b"])
    s0 = arch.base_size
    x = np.maximum(a0, 0.0).reshape(n, arch.base_channels, s0, s0)
    cache = GeneratorCache(net, p.data.copy(), y, h0, a0)
    act, _ = ACTIVATIONS[arch.activation]
    for i, _ in enumerate(arch.stage_channels):
        u = upsample2x_forward(x)
        pre = conv_forward(u, p[f"s{i}_W"], p[f"s{i}_b"])
        noisy = inject_noise(pre, cfg, rng)
        x = act(noisy)
        cache.stages.append((u, pre, noisy, x))
    o = conv_forward(x, p["out_W"], p["out_b"])
    image = np.tanh(o[:, 0])
    cache.last, cache.image = x, image
    return image, cache


def generator_backward(cache: GeneratorCache, grad_wrt_image):
    """Gradients wrt generator params and wrt ``z``; injection noise acts as a constant offset."""
    net = cache.net
    arch, p = net.arch, net.params
    if not np.array_equal(p.data, cache.snapshot):
        raise InvalidStateError("generator parameters changed since the forward pass")
    g = np.asarray(grad_wrt_image, dtype=np.float64)
    if g.shape != cache.image.shape:
        raise InvalidParameterError(f"gradient shape {g.shape} != image shape {cache.image.shape}")
    grads = net.params.zeros_like()
    do = tanh_backward(g, cache.image)[:, None]
    dx, dW, db = conv_backward(do, cache.last, p["out_W"])
    grads["out_W"][...], grads["out_b"][...] = dW, db
    _, act_bwd = ACTIVATIONS[arch.activation]
    for i in reversed(range(len(arch.stage_channels))):
        u, pre, noisy, x = cache.stages[i]
        dnoisy = act_bwd(dx, noisy, x)
        du, dW, db = conv_backward(dnoisy, u, p[f"s{i}_W"])
        grads[f"s{i}_W"][...], grads[f"s{i}_b"][...] = dW, db
        dx = upsample2x_backward(du)
    da0 = dx.reshape(cache.a0.shape) * (cache.a0 > 0)
    dh0, dW, db = affine_backward(da0, cache.h0, p["fc_W"])
    grads["fc_W"][...], grads["fc_b"][...] = dW, db
    dz = dh0[:, :arch.latent_dim].copy()
    if cache.labels is not None:
        np.add.at(grads["embed"], cache.labels, dh0[:, arch.latent_dim:])
    return grads, dz


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorArch:
    in_dim: int = 64
    hidden: int = 64

    def segments(self):
        return [("W1", (self.in_dim, self.hidden)), ("b1", (self.hidden,)), ("w2", (self.hidden,)), ("b2", (1,))]


@dataclass
class DiscriminatorNet:
    """Two-layer tanh critic ``D(x) = w2 . tanh(W1 x + b1) + b2``."""

    arch: DiscriminatorArch
    params: ParamVector

    @classmethod
    def init(cls, arch: DiscriminatorArch, rng: RngStream) -> "DiscriminatorNet":
        p = ParamVector(arch.segments())
        p["W1"][...] = _init(rng, p["W1"].shape, arch.in_dim)
        p["w2"][...] = _init(rng, p["w2"].shape, arch.hidden)
        return cls(arch, p)


def _flat(x, in_dim):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != in_dim:
        raise InvalidParameterError(f"input has {flat.shape[1]} features, expected {in_dim}")
    return flat


def discriminator_forward(d: DiscriminatorNet, x):
    p = d.params
    xf = _flat(x, d.arch.in_dim)
    h = np.tanh(affine_forward(xf, p["W1"], p["b1"]))
    out = h @ p["w2"] + p["b2"][0]
    return out, (d, p.data.copy(), np.shape(x), xf, h)


def discriminator_backward(cache, grad_wrt_out):
    """Gradients of ``sum(grad_wrt_out * D(x))`` wrt params and input."""
    d, snapshot, shape, xf, h = cache
    p = d.params
    if not np.array_equal(p.data, snapshot):
        raise InvalidStateError("discriminator parameters changed since the forward pass")
    g = np.asarray(grad_wrt_out, dtype=np.float64)
    grads = p.zeros_like()
    grads["w2"][...] = h.T @ g
    grads["b2"][...] = g.sum()
    da = np.outer(g, p["w2"]) * (1.0 - h * h)
    dx, grads["W1"][...], grads["b1"][...] = affine_backward(da, xf, p["W1"])
    return grads, dx.reshape(shape)


@dataclass
class DiscriminatorBank:
    arch: DiscriminatorArch
    nets: list[DiscriminatorNet]
    assignment: dict[int, int]

    @classmethod
    def init(cls, arch: DiscriminatorArch, k: int, rng: RngStream) -> "DiscriminatorBank":
        nets = [DiscriminatorNet.init(arch, rng.spawn(f"disc{i}")) for i in range(k)]
        return cls(arch, nets, {i: i for i in range(k)})

    def __len__(self):
        return len(self.nets)

    def copy(self) -> "DiscriminatorBank":
        return DiscriminatorBank(self.arch, [DiscriminatorNet(self.arch, n.params.copy()) for n in self.nets],
                                 dict(self.assignment))


# ---------------------------------------------------------------------------
# MLP family: classifier, encoder, probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPArch:
    sizes: tuple[int, ...]
    activation: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise InvalidParameterError("an MLP needs at least input and output sizes")

    def segments(self):
        segs = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            segs += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        return segs


def mlp_init(arch: MLPArch, rng: RngStream) -> ParamVector:
    p = ParamVector(arch.segments())
    for i, a in enumerate(arch.sizes[:-1]):
        p[f"W{i}"][...] = _init(rng, p[f"W{i}"].shape, a) * (np.sqrt(2.0) if arch.activation == "relu" else 1.0)
    return p


def mlp_forward(arch: MLPArch, params: ParamVector, x):
    xf = _flat(x, arch.sizes[0])
    act, _ = ACTIVATIONS[arch.activation]
    out_act, _ = ACTIVATIONS[arch.output]
    layers = []
    h = xf
    n_layers = len(arch.sizes) - 1
    for i in range(n_layers):
        a = affine_forward(h, params[f"W{i}"], params[f"b{i}"])
        nxt = act(a) if i < n_layers - 1 else out_act(a)
        layers.append((h, a, nxt))
        h = nxt
    return h, (arch, params, params.data.copy(), np.shape(x), layers)


def mlp_backward(cache, grad_out):
    arch, params, snapshot, shape, layers = cache
    if not np.array_equal(params.data, snapshot):
        raise InvalidStateError("parameters changed since the forward pass")
    _, act_bwd = ACTIVATIONS[arch.activation]
    _, out_bwd = ACTIVATIONS[arch.output]
    grads = params.zeros_like()
    g = np.asarray(grad_out, dtype=np.float64)
    n_layers = len(layers)
    for i in reversed(range(n_layers)):
        h, a, out = layers[i]
        da = (act_bwd if i < n_layers - 1 else out_bwd)(g, a, out)
        g, grads[f"W{i}"][...], grads[f"b{i}"][...] = affine_backward(da, h, params[f"W{i}"])
    return grads, g.reshape(shape)


@dataclass
class ClassifierNet:
    """ReLU MLP producing class logits; the last hidden layer is the feature layer."""

    arch: MLPArch
    params: ParamVector

    @classmethod
    def init(cls, in_dim: int, n_classes: int, rng: RngStream, hidden=(64, 32)) -> "ClassifierNet":
        arch = MLPArch((in_dim, *hidden, n_classes), "relu")
        return cls(arch, mlp_init(arch, rng))

    @property
    def n_classes(self) -> int:
        return self.arch.sizes[-1]

    @property
    def feature_dim(self) -> int:
        return self.arch.sizes[-2]


def classifier_forward(c: ClassifierNet, x):
    """Logits and cache; probabilities via :func:`classifier_probs`."""
    return mlp_forward(c.arch, c.params, x)


def classifier_backward(cache, grad_wrt_logits):
    return mlp_backward(cache, grad_wrt_logits)


def classifier_probs(c: ClassifierNet, x) -> np.ndarray:
    logits, _ = classifier_forward(c, x)
    return softmax(logits)


def classifier_features(c: ClassifierNet, x) -> np.ndarray:
    """Penultimate (last hidden) activations."""
    _, (_, _, _, _, layers) = classifier_forward(c, x)
    return layers[-1][0]


@dataclass
class EncoderNet:
    """Deterministic tanh MLP from an image to a latent code."""

    arch: MLPArch
    params: ParamVector

    @classmethod
    def init(cls, in_dim: int, latent_dim: int, rng: RngStream, hidden=(32,)) -> "EncoderNet":
        arch = MLPArch((in_dim, *hidden, latent_dim), "tanh")
        return cls(arch, mlp_init(arch, rng))

    @property
    def latent_dim(self) -> int:
        return self.arch.sizes[-1]


def encoder_forward(e: EncoderNet, x):
    return mlp_forward(e.arch, e.params, x)


def encoder_backward(cache, grad_wrt_code):
    return mlp_backward(cache, grad_wrt_code)


@dataclass(frozen=True)
class ConvArch:
    image_size: int = 8
    channels: tuple[int, ...] = (8, 8)
    kernel: int = 3
    n_classes: int = 2

    def segments(self):
        segs, prev = [], 1
        for i, c in enumerate(self.channels):
            segs += [(f"c{i}_W", (c, prev, self.kernel, self.kernel)), (f"c{i}_b", (c,))]
            prev = c
        segs += [("fc_W", (prev * self.image_size ** 2, self.n_classes)), ("fc_b", (self.n_classes,))]
        return segs


@dataclass
class ConvClassifier:
    """Convolution stack with ReLU and a linear head ("cnn-like" probe)."""

    arch: ConvArch
    params: ParamVector

    @classmethod
    def init(cls, arch: ConvArch, rng: RngStream) -> "ConvClassifier":
        p = ParamVector(arch.segments())
        for i, _ in enumerate(arch.channels):
            w = p[f"c{i}_W"]
            w[...] = _init(rng, w.shape, int(np.prod(w.shape[1:]))) * np.sqrt(2.0)
        p["fc_W"][...] = _init(rng, p["fc_W"].shape, p["fc_W"].shape[0])
        return cls(arch, p)


def conv_classifier_forward(net: ConvClassifier, x):
    p, arch = net.params, net.arch
    x = np.asarray(x, dtype=np.float64)
    h = x.reshape(x.shape[0], 1, arch.image_size, arch.image_size)
    layers = []
    for i, _ in enumerate(arch.channels):
        a = conv_forward(h, p[f"c{i}_W"], p[f"c{i}_b"])
        layers.append((h, a))
        h = np.maximum(a, 0.0)
    flat = h.reshape(h.shape[0], -1)
    logits = affine_forward(flat, p["fc_W"], p["fc_b"])
    return logits, (net, p.data.copy(), x.shape, layers, h.shape, flat)


def conv_classifier_backward(cache, grad_wrt_logits):
    net, snapshot, shape, layers, hshape, flat = cache
    p = net.params
    if not np.array_equal(p.data, snapshot):
        raise InvalidStateError("parameters changed since the forward pass")
    grads = p.zeros_like()
    dflat, grads["fc_W"][...], grads["fc_b"][...] = affine_backward(grad_wrt_logits, flat, p["fc_W"])
    dh = dflat.reshape(hshape)
    for i in reversed(range(len(layers))):
        h, a = layers[i]
        da = dh * (a > 0)
        dh, grads[f"c{i}_W"][...], grads[f"c{i}_b"][...] = conv_backward(da, h, p[f"c{i}_W"])
    return grads, dh.reshape(shape)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    generator: GeneratorNet
    discriminators: DiscriminatorBank
    classifier: ClassifierNet
    encoder: EncoderNet

    @classmethod
    def init(cls, gen_arch: GeneratorArch, k: int, rng: RngStream, disc_hidden: int = 64) -> "ModelBundle":
        pixels = gen_arch.image_size ** 2
        return cls(
            GeneratorNet.init(gen_arch, rng.spawn("generator")),
            DiscriminatorBank.init(DiscriminatorArch(pixels, disc_hidden), k, rng.spawn("discriminators")),
            ClassifierNet.init(pixels, gen_arch.n_classes, rng.spawn("classifier")),
            EncoderNet.init(pixels, gen_arch.latent_dim, rng.spawn("encoder")),
        )

    def descriptors(self) -> dict:
        return {
            "generator": asdict(self.generator.arch),
            "discriminator": asdict(self.discriminators.arch),
            "k": len(self.discriminators),
            "classifier": asdict(self.classifier.arch),
            "encoder": asdict(self.encoder.arch),
        }
