"""Acceptance criteria 1-10.

Each test records a one-line PASS/FAIL verdict (also printed at the end of the
pytest run) and then asserts the same condition.
"""

import math
import time

import numpy as np
import pytest

import efdp_gan.trainer as trainer_mod
from efdp_gan import checkpoint as ckpt
from efdp_gan.accountant import (
    DEFAULT_ORDERS,
    RdpLedger,
    rdp_gaussian,
    rdp_subsampled_gaussian,
    to_eps_delta,
)
from efdp_gan.cli import main
from efdp_gan.config import save_config
from efdp_gan.data import SynthLayout, synth_dataset
from efdp_gan.desk import FdProbe, desk_config, desk_data, run_desk
from efdp_gan.losses import (
    LossWeights,
    generator_param_grad,
    loss_classifier,
    loss_discriminator,
    loss_generator,
    loss_reconstruction,
)
from efdp_gan.metrics import FeatureStats, frechet_distance, inception_score_from_probs
from efdp_gan.models import (
    ClassifierNet,
    DiscriminatorArch,
    DiscriminatorBank,
    DiscriminatorNet,
    EncoderNet,
    GeneratorNet,
    ModelBundle,
    NoiseConfig,
)
from efdp_gan.numeric import RngStream, grad_check
from efdp_gan.sanitizer import ClipConfig, DpNoiseConfig, EfState, clip, dp_noise, ef_step
from efdp_gan.trainer import parse_record, train

from conftest import ACCEPTANCE, TINY_ARCH, randomize, small_cfg


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)


# 1 ----------------------------------------------------------------------------

def test_1_clipping_suite():
    start = time.perf_counter()
    rng = RngStream(1, "acc-clip")
    worst_excess, changed = 0.0, 0
    for i in range(1000):
        dim = (1, 10, 10 ** 4)[i % 3]
        c = (0.1, 1.0, 10.0)[(i // 3) % 3]
        g = rng.normal((dim,), 0.0, rng.uniform((), 0.0, 3.0 * c / math.sqrt(dim)) if i % 2 else 10.0 * c)
        out = clip(g, c)
        worst_excess = max(worst_excess, np.linalg.norm(out) - c)
        if np.linalg.norm(g) <= c and not np.array_equal(out, g):
            changed += 1
    seconds = time.perf_counter() - start
    ok = worst_excess <= 1e-12 and changed == 0 and seconds < 1.0
    verdict(1, "clipping", ok, f"max(|clip|-c)={worst_excess:.2e}, in-range altered={changed}, {seconds:.2f}s")
    assert ok


# 2 ----------------------------------------------------------------------------

def _straight_line(gs, c1, c2):
    err = {s: np.zeros_like(gs[0][s]) for s in gs[0]}
    for grads in gs:
        for s, g in grads.items():
            e = err[s]
            v = g / max(1.0, math.sqrt(float(np.sum(g * g))) / c1) + e / max(1.0, math.sqrt(float(np.sum(e * e))) / c2)
            err[s] = e + g - v
    return err


def test_2_ef_oracle_and_telescoping(monkeypatch):
    start = time.perf_counter()
    rng = RngStream(2, "acc-ef")
    gs = [{s: rng.normal((16,), 0.0, 2.0) for s in "dce"} for _ in range(100)]
    cfg = ClipConfig(0.5, 1.5)
    state = EfState.zeros((16,))
    for g in gs:
        _, state, _ = ef_step(state, g, cfg)
    ref = _straight_line(gs, 0.5, 1.5)
    dev = max(np.max(np.abs(ref[s] - state.errors[s])) for s in "dce")

    # telescoping on a logged training run: sum_t v_t == sum_t g_t - e_T
    logged = []
    original = trainer_mod.sanitize_hook

    def logging_hook(grads, st, clip_cfg, noise_cfg, r):
        v, _, _ = ef_step(st, grads, clip_cfg)
        logged.append((sum(grads.values()), v))
        return original(grads, st, clip_cfg, noise_cfg, r)

    monkeypatch.setattr(trainer_mod, "sanitize_hook", logging_hook)
    run = train(small_cfg(iterations=20, c1=0.05, c2=0.5, epsilon=1e3), synth_dataset(SynthLayout(per_class=12), 0))
    total_g = sum(g for g, _ in logged)
    total_v = sum(v for _, v in logged)
    tele = float(np.max(np.abs(total_v - (total_g - sum(run.state.ef.errors.values())))))
    seconds = time.perf_counter() - start
    ok = dev <= 1e-12 and tele <= 1e-10 and len(logged) == 20 and seconds < 1.0
    verdict(2, "EF oracle", ok, f"replay dev={dev:.1e}, telescoping dev={tele:.1e} over {len(logged)} logged "
                                f"steps, {seconds:.2f}s")
    assert ok


# 3 ----------------------------------------------------------------------------

def test_3_noise_calibration():
    start = time.perf_counter()
    rows = []
    for sigma, c1, c2, target in [(1, 1, 0.5, 2.0), (1, 1, 0, 1.0), (2, 0.5, 1, 3.0)]:
        draws = dp_noise((10 ** 5,), DpNoiseConfig(sigma), ClipConfig(c1, c2), RngStream(3, f"acc-noise{target}"))
        rows.append(abs(draws.var() / target - 1))
    seconds = time.perf_counter() - start
    ok = max(rows) <= 0.03 and seconds < 5
    verdict(3, "DP noise", ok, "rel. variance errors " + ", ".join(f"{r:.4f}" for r in rows) + f", {seconds:.2f}s")
    assert ok


# 4 ----------------------------------------------------------------------------

def test_4_accountant():
    start = time.perf_counter()
    a = rdp_gaussian(2, 1, 1) == 1.0
    b = max(abs(rdp_subsampled_gaussian(o, s, 1.0) - rdp_gaussian(o, s)) for o in DEFAULT_ORDERS for s in (0.5, 1, 4))
    c = abs(rdp_subsampled_gaussian(2, 1.0, 0.1) - math.log(1 + 0.01 * (math.e - 1)))
    base = RdpLedger(1.0, 0.1)
    ledger = base
    for _ in range(10 ** 4):
        ledger = ledger.with_steps(ledger.steps + 1)
    d = np.array_equal(ledger.eps_per_order, 10 ** 4 * base.per_step)
    violations = 0
    for lam in range(2, 65):
        for s in (0.5, 1, 2):
            row = [rdp_subsampled_gaussian(lam, s, g) for g in (0.01, 0.1, 0.5)]
            violations += sum(x > y for x, y in zip(row, row[1:]))
        for g in (0.01, 0.1, 0.5):
            col = [rdp_subsampled_gaussian(lam, s, g) for s in (0.5, 1, 2)]
            violations += sum(x < y for x, y in zip(col, col[1:]))
    eps_steps = [to_eps_delta(base.with_steps(t), 1e-5) for t in (0, 1, 10, 100, 1000, 10 ** 4)]
    violations += sum(x > y for x, y in zip(eps_steps, eps_steps[1:]))
    seconds = time.perf_counter() - start
    ok = a and b <= 1e-9 and c <= 1e-9 and d and violations == 0 and seconds < 10
    verdict(4, "accountant", ok, f"(a) {a}, (b) {b:.1e}, (c) {c:.1e}, (d) {d}, (e) violations={violations}, "
                                 f"{seconds:.2f}s")
    assert ok


# 5 ----------------------------------------------------------------------------

def _bundle(rng):
    g = GeneratorNet.init(TINY_ARCH, rng.spawn("g"))
    d = DiscriminatorNet.init(DiscriminatorArch(64, 3), rng.spawn("d"))
    c = ClassifierNet.init(64, 2, rng.spawn("c"), hidden=(4, 3))
    e = EncoderNet.init(64, TINY_ARCH.latent_dim, rng.spawn("e"), hidden=(3,))
    for net in (g, d, c, e):
        randomize(net.params, rng.spawn("r"))
    return ModelBundle(g, DiscriminatorBank(d.arch, [d], {0: 0}), c, e)


def test_5_gradient_checks():
    start = time.perf_counter()
    zero = NoiseConfig(0.0)
    w = LossWeights(10.0, 0.7, 1.3)
    worst = {"L_D": 0.0, "L_C": 0.0, "L_En": 0.0, "L_G": 0.0}
    sizes = {}
    for seed in range(20):
        rng = RngStream(seed, "acc-grad")
        b = _bundle(rng)
        d = b.discriminators.nets[0]
        real, fake = rng.uniform((4, 8, 8), -1, 1), rng.uniform((4, 8, 8), -1, 1)
        alpha = rng.uniform((4,))
        _, gd = loss_discriminator(d, real, fake, w, alpha=alpha)
        worst["L_D"] = max(worst["L_D"], grad_check(
            lambda p: loss_discriminator(DiscriminatorNet(d.arch, p), real, fake, w, alpha=alpha)[0], d.params, gd))

        z, y = rng.normal((4, 3)), np.array([0, 1, 1, 0])
        _, gc, _ = loss_classifier(b.classifier, b.generator, z, y, zero, rng)
        worst["L_C"] = max(worst["L_C"], grad_check(
            lambda p: loss_classifier(ClassifierNet(b.classifier.arch, p), b.generator, z, y, zero, rng)[0],
            b.classifier.params, gc))

        x, yx = rng.uniform((2, 8, 8), -1, 1), np.array([1, 0])
        _, ge, _ = loss_reconstruction(b.encoder, b.generator, x, zero, rng, labels=yx)
        worst["L_En"] = max(worst["L_En"], grad_check(
            lambda p: loss_reconstruction(EncoderNet(b.encoder.arch, p), b.generator, x, zero, rng, labels=yx)[0],
            b.encoder.params, ge))

        zg, yg = z[:2], y[:2]
        res = loss_generator(b, d, zg, yg, x, yx, w, zero, rng)
        gg = generator_param_grad(res, res.grads["d"] + res.grads["c"] + res.grads["e"])

        def total(p):
            bb = ModelBundle(GeneratorNet(TINY_ARCH, p), b.discriminators, b.classifier, b.encoder)
            return loss_generator(bb, d, zg, yg, x, yx, w, zero, rng).total

        worst["L_G"] = max(worst["L_G"], grad_check(total, b.generator.params, gg))
        sizes = {"L_D": d.params.data.size, "L_C": b.classifier.params.data.size,
                 "L_En": b.encoder.params.data.size, "L_G": b.generator.params.data.size}
    seconds = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and max(sizes.values()) <= 500 and seconds < 30
    verdict(5, "gradient checks", ok, ", ".join(f"{k} {v:.1e} ({sizes[k]} params)" for k, v in worst.items())
            + f", 20 seeds, {seconds:.1f}s")
    assert ok


# 6 ----------------------------------------------------------------------------

def test_6_frechet_and_is():
    start = time.perf_counter()
    rng = RngStream(6, "acc-fd")
    self_fd = 0.0
    for dim in (1, 4, 16, 32):
        a = rng.normal((dim, dim))
        s = FeatureStats(rng.normal((dim,)), a @ a.T / dim)
        self_fd = max(self_fd, frechet_distance(s, s))
    shift_dev = 0.0
    for _ in range(50):
        dim = int(rng.integers(19)) + 1
        mu, d = rng.normal((dim,)), rng.normal((dim,), 0, 3)
        shift_dev = max(shift_dev, abs(frechet_distance(FeatureStats(mu, np.eye(dim)),
                                                        FeatureStats(mu + d, np.eye(dim))) - d @ d))
    diag_dev = 0.0
    for dim in (1, 5, 20):
        da, db = rng.uniform((dim,), 0.1, 4), rng.uniform((dim,), 0.1, 4)
        ref = float(np.sum(da + db - 2 * np.sqrt(da * db)))
        diag_dev = max(diag_dev, abs(frechet_distance(FeatureStats(np.zeros(dim), np.diag(da)),
                                                      FeatureStats(np.zeros(dim), np.diag(db))) - ref))
    is_bad = 0
    for k in (2, 3, 10):
        for _ in range(30):
            logits = rng.normal((40, k), 0, float(rng.uniform((), 0, 8)))
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            score = inception_score_from_probs(p)
            is_bad += not (1 - 1e-12 <= score <= k + 1e-12)
    seconds = time.perf_counter() - start
    ok = self_fd <= 1e-8 and shift_dev <= 1e-6 and diag_dev <= 1e-6 and is_bad == 0 and seconds < 5
    verdict(6, "Frechet metric", ok, f"FD(a,a)={self_fd:.1e}, shift dev={shift_dev:.1e}, diag dev={diag_dev:.1e}, "
                                     f"IS out of range={is_bad}, {seconds:.2f}s")
    assert ok


# 7 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    data = desk_data()
    return data, FdProbe(*data)


@pytest.mark.slow
def test_7_desk_end_to_end(desk):
    data, probe = desk
    cfg = desk_config(seed=0)
    r = run_desk(cfg, data, probe)
    ratio = r.fd_final / r.fd_init
    ok = r.epsilon <= 10.0 and ratio <= 0.2 and r.g2r_mlp >= 0.80 and r.seconds <= 600
    verdict(7, "desk end-to-end", ok,
            f"sigma={cfg.sigma}, T={r.iterations}, eps={r.epsilon:.3f}; FD {r.fd_init:.1f} -> {r.fd_final:.1f} "
            f"(ratio {ratio:.3f}, need <= 0.2); g2r MLP {r.g2r_mlp:.3f} (need >= 0.80); {r.seconds:.0f}s")
    assert ok


# 8 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_8_ablation_trends(desk):
    data, probe = desk
    start = time.perf_counter()
    div_wins, fd_wins, fd_worst = 0, 0, -np.inf
    rows = []
    for seed in range(5):
        base = run_desk(desk_config(seed=seed), data, probe)
        no_inj = run_desk(desk_config(seed=seed, sigma_noise=0.0), data, probe)
        no_rec = run_desk(desk_config(seed=seed, gamma_recon=0.0), data, probe)
        div_wins += base.diversity > no_inj.diversity
        fd_wins += base.fd_final < no_rec.fd_final
        fd_worst = max(fd_worst, base.fd_final / no_rec.fd_final - 1)
        rows.append(f"s{seed}: div {base.diversity:.2f}/{no_inj.diversity:.2f} "
                    f"FD {base.fd_final:.1f}/{no_rec.fd_final:.1f}")
    seconds = time.perf_counter() - start
    ok = div_wins >= 4 and fd_wins >= 3 and fd_worst <= 0.10 and seconds <= 3600
    verdict(8, "ablation trends", ok,
            f"(a) diversity up in {div_wins}/5; (b) FD better in {fd_wins}/5, worst change {fd_worst:+.1%}; "
            f"{seconds:.0f}s [" + "; ".join(rows) + "]")
    assert ok


# 9 ----------------------------------------------------------------------------

def test_9_privacy_gate_and_release_surface(tmp_path):
    start = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path / "data"), "--per-class", "12"]) == 0
    cfg = small_cfg(sigma=3.0, gamma=0.5, epsilon=3.0, iterations=1000)
    save_config(cfg, tmp_path / "cfg.toml")
    code = main(["train", "--config", str(tmp_path / "cfg.toml"), "--out", str(tmp_path / "run"),
                 "--dataset-images", str(tmp_path / "data/images.idx"),
                 "--dataset-labels", str(tmp_path / "data/labels.idx")])
    records = [parse_record(line) for line in (tmp_path / "run/private/metrics.log").read_text().splitlines()]
    # replay: recompute each logged step's epsilon from the ledger definition
    base = RdpLedger(cfg.sigma, cfg.sampling_rate, cfg.orders)
    replayed = [to_eps_delta(base.with_steps(r["iteration"]), cfg.delta) for r in records]
    over = sum(e > cfg.epsilon for e in replayed)
    next_eps = to_eps_delta(base.with_steps(len(records) + 1), cfg.delta)
    gate_tight = next_eps > cfg.epsilon

    public = tmp_path / "run" / "public"
    leaked = []
    for f in public.iterdir():
        if f.suffix == ".ckpt":
            leaked += [s for s in ckpt.read_sections(f) if s.startswith(("param/", "ef")) and s != "param/generator"]
        else:
            text = f.read_text()
            leaked += [k for k in ("disc", "classifier", "encoder", "ef/") if k in text]
    seconds = time.perf_counter() - start
    ok = code == 0 and over == 0 and gate_tight and not leaked and len(records) > 0 and seconds < 60
    verdict(9, "privacy gate & release", ok,
            f"{len(records)} logged updates, {over} past budget, next step eps {next_eps:.3f} > {cfg.epsilon}; "
            f"public files {sorted(p.name for p in public.iterdir())}, non-generator sections {leaked}; "
            f"{seconds:.1f}s")
    assert ok


# 10 ---------------------------------------------------------------------------

def test_10_resume_bit_identical(tmp_path):
    start = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path / "data"), "--per-class", "200", "--seed", "1"]) == 0
    save_config(desk_config(iterations=6, n_pre=5), tmp_path / "cfg.toml")
    data = ["--dataset-images", str(tmp_path / "data/images.idx"), "--dataset-labels", str(tmp_path / "data/labels.idx")]
    base = ["train", "--config", str(tmp_path / "cfg.toml"), *data]
    assert main([*base, "--out", str(tmp_path / "full")]) == 0
    assert main([*base, "--out", str(tmp_path / "staged"), "--until", "3"]) == 0
    assert main(["train", "--resume", str(tmp_path / "staged/private/run.ckpt"), "--out", str(tmp_path / "staged"),
                 *data]) == 0
    full, _ = ckpt.load_run(tmp_path / "full/private/run.ckpt")
    staged, _ = ckpt.load_run(tmp_path / "staged/private/run.ckpt")
    same = (full.iteration == staged.iteration == 6
            and np.array_equal(full.bundle.generator.params.data, staged.bundle.generator.params.data)
            and all(np.array_equal(full.ef.errors[s], staged.ef.errors[s]) for s in full.ef.errors)
            and all(np.array_equal(a.params.data, b.params.data)
                    for a, b in zip(full.bundle.discriminators.nets, staged.bundle.discriminators.nets)))
    files_same = all((tmp_path / "full" / f).read_bytes() == (tmp_path / "staged" / f).read_bytes()
                     for f in ("public/generator.ckpt", "private/run.ckpt", "private/metrics.log"))
    seconds = time.perf_counter() - start
    ok = same and files_same and seconds < 60
    verdict(10, "determinism & resume", ok, f"t=3 -> 6 state equal={same}, output bytes equal={files_same}, "
                                            f"{seconds:.1f}s")
    assert ok
