"""Multi-component private training loop.

Per iteration: pick a subset ``j`` uniformly, train critic ``j`` on it, train
the encoder and classifier, then take one sanitized generator step and charge
the privacy ledger.  Only the generator is ever released.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .accountant import RdpLedger, step_account, to_eps_delta
from .config import TrainConfig
from .data import LabeledDataset
from .losses import (
    classifier_loss_on_images,
    generator_param_grad,
    loss_classifier,
    loss_discriminator,
    loss_generator,
    loss_reconstruction,
)
from .models import (
    ClassifierNet,
    DiscriminatorBank,
    DiscriminatorNet,
    EncoderNet,
    GeneratorNet,
    ModelBundle,
    generator_forward,
)
from .numeric import InvalidParameterError, RngStream, l2_norm
from .sanitizer import EfState, apply_update, sanitize_hook

log = logging.getLogger(__name__)

STREAMS = ("subset", "data", "latent", "labels", "alpha", "injection", "dp_noise")


class BudgetExhausted(RuntimeError):
    """The next generator step would push the converted epsilon past the budget."""


def partition_dataset(n: int | LabeledDataset, k: int, seed: int, batch: int = 1,
                      drop_remainder: bool = False) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and split into ``k`` disjoint, near-equal subsets.

    With ``drop_remainder`` the ``n mod k`` leftover samples are discarded and all
    subsets have equal size; otherwise sizes differ by at most one.
    """
    if isinstance(n, LabeledDataset):
        n = len(n)
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    if n < k * batch:
        raise InvalidParameterError(f"dataset of {n} samples is too small for k={k}, batch={batch}")
    order = RngStream(seed, "partition").permutation(n)
    if drop_remainder:
        order = order[: n - n % k]
    return [np.sort(part) for part in np.array_split(order, k)]


class SubsetLoader:
    """Draws batches from one subset at a time; optionally logs which indices each consumer read."""

    def __init__(self, dataset: LabeledDataset, subsets: list[np.ndarray], record: bool = False):
        self.dataset = dataset
        self.subsets = subsets
        self.record = record
        self.accesses: list[tuple[str, int, np.ndarray]] = []

    def batch(self, j: int, size: int, rng: RngStream, consumer: str = ""):
        pool = self.subsets[j]
        if size > len(pool):
            raise InvalidParameterError(f"subset {j} has {len(pool)} samples, batch needs {size}")
        idx = pool[rng.permutation(len(pool))[:size]]
        if self.record:
            self.accesses.append((consumer, j, idx))
        return self.dataset.images[idx], self.dataset.labels[idx]


@dataclass
class RunState:
    bundle: ModelBundle
    ef: EfState
    ledger: RdpLedger
    iteration: int
    rngs: dict[str, RngStream]
    subsets: list[np.ndarray]
    aux: list[tuple[ClassifierNet, EncoderNet]] = field(default_factory=list)

    def copy(self) -> "RunState":
        b = self.bundle
        bundle = ModelBundle(
            GeneratorNet(b.generator.arch, b.generator.params.copy()),
            b.discriminators.copy(),
            ClassifierNet(b.classifier.arch, b.classifier.params.copy()),
            EncoderNet(b.encoder.arch, b.encoder.params.copy()),
        )
        aux = [(ClassifierNet(c.arch, c.params.copy()), EncoderNet(e.arch, e.params.copy())) for c, e in self.aux]
        rngs = {k: RngStream.from_state(r.get_state()) for k, r in self.rngs.items()}
        return RunState(bundle, self.ef.copy(), self.ledger, self.iteration, rngs,
                        [s.copy() for s in self.subsets], aux)

    def aux_for(self, j: int) -> tuple[ClassifierNet, EncoderNet]:
        if self.aux:
            return self.aux[j]
        return self.bundle.classifier, self.bundle.encoder

    def epsilon(self, delta: float) -> float:
        return to_eps_delta(self.ledger, delta)


def _check_dataset(cfg: TrainConfig, dataset: LabeledDataset):
    if dataset.image_shape != (cfg.image_size, cfg.image_size):
        raise InvalidParameterError(f"dataset images are {dataset.image_shape}, config expects "
                                    f"{cfg.image_size}x{cfg.image_size}")
    if dataset.n_classes != cfg.n_classes:
        raise InvalidParameterError(f"dataset has {dataset.n_classes} classes, config {cfg.n_classes}")
    if len(dataset) < cfg.k * cfg.batch:
        raise InvalidParameterError(f"dataset of {len(dataset)} samples is too small for "
                                    f"k={cfg.k}, batch={cfg.batch}")


def init_state(cfg: TrainConfig, dataset: LabeledDataset, bank: DiscriminatorBank | None = None) -> RunState:
    _check_dataset(cfg, dataset)
    root = RngStream(cfg.seed, "run")
    bundle = ModelBundle.init(cfg.gen_arch, cfg.k, root.spawn("init"), cfg.disc_hidden)
    if bank is not None:
        if len(bank) != cfg.k or bank.arch != bundle.discriminators.arch:
            raise InvalidParameterError("discriminator bank does not match the config")
        bundle.discriminators = bank.copy()
    subsets = partition_dataset(len(dataset), cfg.k, cfg.seed, cfg.batch, cfg.drop_remainder)
    shape = (2 * cfg.batch, cfg.image_size, cfg.image_size)
    aux = []
    if cfg.per_subset_aux:
        pixels = cfg.image_size ** 2
        aux_rng = root.spawn("aux")
        aux = [(ClassifierNet.init(pixels, cfg.n_classes, aux_rng.spawn(f"c{j}")),
                EncoderNet.init(pixels, cfg.latent_dim, aux_rng.spawn(f"e{j}"))) for j in range(cfg.k)]
    return RunState(
        bundle=bundle,
        ef=EfState.zeros(shape, mode=cfg.ef_mode),
        ledger=RdpLedger(cfg.sigma, cfg.sampling_rate, cfg.orders),
        iteration=0,
        rngs={name: root.spawn(name) for name in STREAMS},
        subsets=subsets,
        aux=aux,
    )


def _sgd(params, grads, eta):
    params.data -= eta * grads.data


def _uniform_labels(rng: RngStream, n: int, n_classes: int) -> np.ndarray:
    return np.asarray(rng.integers(n_classes, size=n), dtype=np.int64)


def critic_step(d: DiscriminatorNet, g: GeneratorNet, x, cfg: TrainConfig, rngs) -> float:
    z = rngs["latent"].normal((len(x), cfg.latent_dim))
    y = _uniform_labels(rngs["labels"], len(x), cfg.n_classes)
    fake, _ = generator_forward(g, z, y, cfg.noise, rngs["injection"])
    loss, grads = loss_discriminator(d, x, fake, cfg.weights, rngs["alpha"])
    _sgd(d.params, grads, cfg.eta_d)
    return loss


def pretrain_discriminators(dataset: LabeledDataset, subsets, cfg: TrainConfig, generator: GeneratorNet,
                            bank: DiscriminatorBank, loader: SubsetLoader | None = None,
                            n_pre: int | None = None) -> tuple[DiscriminatorBank, list[float]]:
    """Train critic ``i`` for ``n_pre`` steps on subset ``i`` only, against a frozen generator."""
    n_pre = cfg.n_pre if n_pre is None else n_pre
    loader = loader or SubsetLoader(dataset, subsets)
    bank = bank.copy()
    root = RngStream(cfg.seed, "pretrain")
    final = []
    for i, d in enumerate(bank.nets):
        rngs = {name: root.spawn(f"{i}/{name}") for name in STREAMS}
        loss = float("nan")
        for _ in range(n_pre):
            x, _ = loader.batch(bank.assignment[i], cfg.batch, rngs["data"], consumer=f"pretrain:{i}")
            loss = critic_step(d, generator, x, cfg, rngs)
        final.append(loss)
    return bank, final


def train_iteration(state: RunState, cfg: TrainConfig, dataset: LabeledDataset,
                    loader: SubsetLoader | None = None) -> tuple[RunState, dict]:
    """One outer iteration; returns the new state and a record of logged scalars.

    Raises :class:`BudgetExhausted` (leaving ``state`` untouched) if charging
    this iteration would exceed the configured epsilon.
    """
    next_ledger = step_account(state.ledger)
    eps_next = to_eps_delta(next_ledger, cfg.delta)
    if eps_next > cfg.epsilon:
        raise BudgetExhausted(f"iteration {state.iteration + 1} would reach epsilon {eps_next:.4f} "
                              f"> {cfg.epsilon}")
    loader = loader or SubsetLoader(dataset, state.subsets)
    st = state.copy()
    r = st.rngs
    b = cfg.batch
    g = st.bundle.generator
    j = int(r["subset"].integers(cfg.k))
    d = st.bundle.discriminators.nets[j]
    classifier, encoder = st.aux_for(j)
    rec: dict = {"iteration": st.iteration + 1, "subset": j}

    # critic j on D_j
    x_real, y_real = None, None
    for _ in range(cfg.n_dis):
        x_real, y_real = loader.batch(j, b, r["data"], consumer=f"disc:{j}")
        rec["loss_d"] = critic_step(d, g, x_real, cfg, r)
    if x_real is None:
        x_real, y_real = loader.batch(j, b, r["data"], consumer=f"aux:{j}")

    # encoder, classifier on fakes, classifier on reals; all reuse the critic's last real batch
    for _ in range(cfg.n_en):
        loss, grads, _ = loss_reconstruction(encoder, g, x_real, cfg.noise, r["injection"], labels=y_real)
        _sgd(encoder.params, grads, cfg.lr_encoder)
        rec["loss_en"] = loss
    for _ in range(cfg.n_f):
        z = r["latent"].normal((b, cfg.latent_dim))
        y = _uniform_labels(r["labels"], b, cfg.n_classes)
        loss, grads, _ = loss_classifier(classifier, g, z, y, cfg.noise, r["injection"])
        _sgd(classifier.params, grads, cfg.eta_c)
        rec["loss_c_fake"] = loss
    for _ in range(cfg.n_r):
        loss, grads, _ = classifier_loss_on_images(classifier, x_real, y_real)
        _sgd(classifier.params, grads, cfg.eta_c)
        rec["loss_c_real"] = loss

    # sanitized generator step
    z = r["latent"].normal((b, cfg.latent_dim))
    y = _uniform_labels(r["labels"], b, cfg.n_classes)
    bundle = ModelBundle(g, st.bundle.discriminators, classifier, encoder)
    result = loss_generator(bundle, d, z, y, x_real, y_real, cfg.weights, cfg.noise, r["injection"])
    sanitized, st.ef = sanitize_hook(result.grads, st.ef, cfg.clip, cfg.dp_noise, r["dp_noise"])
    direction = generator_param_grad(result, sanitized)
    st.bundle.generator = GeneratorNet(g.arch, apply_update(g.params, direction, cfg.eta_g))

    st.ledger = next_ledger
    st.iteration += 1
    rec.update({
        "loss_g": result.total,
        "loss_g_d": result.terms["d"],
        "loss_g_c": result.terms["c"],
        "loss_g_e": result.terms["e"],
        **{f"gnorm_{s}": l2_norm(v) for s, v in result.grads.items()},
        "eps": eps_next,
    })
    return st, rec


def diversity(generator: GeneratorNet, cfg: TrainConfig, n: int = 64, seed: int = 0) -> float:
    """Mean pairwise L2 distance of ``n`` samples from a fixed latent/label set."""
    rng = RngStream(seed, "diversity")
    z = rng.normal((n, cfg.latent_dim))
    y = _uniform_labels(rng, n, cfg.n_classes)
    imgs, _ = generator_forward(generator, z, y, cfg.noise, rng.spawn("injection"))
    return mean_pairwise_l2(imgs)


def mean_pairwise_l2(images) -> float:
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    i, j = np.triu_indices(len(flat), 1)
    return float(np.sqrt(np.sum((flat[i] - flat[j]) ** 2, axis=1)).mean())


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}")
    return "\t".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for part in line.rstrip("\n").split("\t"):
        key, _, val = part.partition("=")
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


@dataclass
class TrainResult:
    generator: GeneratorNet
    ledger: RdpLedger
    metrics: list[dict]
    state: RunState
    stopped_by_budget: bool


def train(cfg: TrainConfig, dataset: LabeledDataset, state: RunState | None = None,
          bank: DiscriminatorBank | None = None, pretrain: bool = True, log_file: TextIO | None = None,
          loader: SubsetLoader | None = None, until: int | None = None,
          callback: Callable[[RunState, dict], None] | None = None) -> TrainResult:
    """Run until ``cfg.iterations`` (or ``until``) or the privacy gate, whichever comes first.

    Without ``state`` a fresh run is initialised; critics are pretrained unless
    a ``bank`` is given or ``pretrain`` is false.
    """
    _check_dataset(cfg, dataset)
    if state is None:
        state = init_state(cfg, dataset, bank)
        if bank is None and pretrain and cfg.n_pre > 0:
            pre_bank, _ = pretrain_discriminators(dataset, state.subsets, cfg, state.bundle.generator,
                                                  state.bundle.discriminators, loader)
            state.bundle.discriminators = pre_bank
    loader = loader or SubsetLoader(dataset, state.subsets)
    stop_at = cfg.iterations if until is None else min(until, cfg.iterations)
    metrics: list[dict] = []
    stopped = False
    while state.iteration < stop_at:
        try:
            state, rec = train_iteration(state, cfg, dataset, loader)
        except BudgetExhausted as exc:
            log.info("privacy gate: %s", exc)
            stopped = True
            break
        if cfg.eval_interval and state.iteration % cfg.eval_interval == 0:
            rec["diversity"] = diversity(state.bundle.generator, cfg)
        metrics.append(rec)
        if log_file is not None:
            log_file.write(format_record(rec) + "\n")
            if "diversity" in rec:
                log_file.flush()
        if callback is not None:
            callback(state, rec)
    return TrainResult(state.bundle.generator, state.ledger, metrics, state, stopped)
