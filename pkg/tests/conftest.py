import numpy as np
import pytest

from efdp_gan.config import TrainConfig
from efdp_gan.models import (
    ClassifierNet,
    DiscriminatorArch,
    DiscriminatorNet,
    EncoderNet,
    GeneratorArch,
    GeneratorNet,
)
from efdp_gan.numeric import RngStream

TINY_ARCH = GeneratorArch(latent_dim=3, n_classes=2, embed_dim=2, base_channels=3, stage_channels=(3, 2), kernel=3)


def randomize(params, rng, scale=0.5):
    """Fill every segment (biases included) so no ReLU sits exactly on its kink."""
    params.data[...] = rng.normal(params.data.shape, 0.0, scale)
    return params


@pytest.fixture
def rng():
    return RngStream(1234, "tests")


@pytest.fixture
def tiny_generator(rng):
    g = GeneratorNet.init(TINY_ARCH, rng.spawn("g"))
    randomize(g.params, rng.spawn("gp"))
    return g


@pytest.fixture
def tiny_discriminator(rng):
    d = DiscriminatorNet.init(DiscriminatorArch(64, 4), rng.spawn("d"))
    randomize(d.params, rng.spawn("dp"))
    return d


@pytest.fixture
def tiny_classifier(rng):
    c = ClassifierNet.init(64, 2, rng.spawn("c"), hidden=(4, 3))
    randomize(c.params, rng.spawn("cp"))
    return c


@pytest.fixture
def tiny_encoder(rng):
    e = EncoderNet.init(64, TINY_ARCH.latent_dim, rng.spawn("e"), hidden=(3,))
    randomize(e.params, rng.spawn("ep"))
    return e


def image_batch(rng, b, size=8):
    return np.tanh(rng.normal((b, size, size)))


SMALL = dict(latent_dim=4, embed_dim=2, base_channels=4, stage_channels=(4, 4), disc_hidden=8,
             batch=4, k=3, n_pre=0, iterations=5, sigma=1.0, eta_g=1e-3, eta_d=0.01, eta_c=0.01,
             n_dis=1, eval_interval=0)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def assert_same_state(a, b):
    pa, pb = a.bundle, b.bundle
    assert np.array_equal(pa.generator.params.data, pb.generator.params.data)
    for x, y in zip(pa.discriminators.nets, pb.discriminators.nets):
        assert np.array_equal(x.params.data, y.params.data)
    assert np.array_equal(pa.classifier.params.data, pb.classifier.params.data)
    assert np.array_equal(pa.encoder.params.data, pb.encoder.params.data)
    for s in a.ef.errors:
        assert np.array_equal(a.ef.errors[s], b.ef.errors[s])
    assert a.ledger.steps == b.ledger.steps and a.iteration == b.iteration
    assert {k: r.get_state() for k, r in a.rngs.items()} == {k: r.get_state() for k, r in b.rngs.items()}


# acceptance criteria record one line each; printed together at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
