"""Command-line front end: ``synth``, ``pretrain``, ``train``, ``generate``, ``eval``, ``account``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .accountant import DEFAULT_ORDERS, DpBudget, RdpLedger, conversion, steps_for_budget
from .config import ConfigError, TrainConfig, load_config, save_config
from .data import IdxFormatError, LabeledDataset, SynthLayout, load_dataset, synth_dataset, write_idx
from .metrics import (
    feature_stats,
    frechet_distance,
    gen2real,
    generator_sampler,
    inception_style_score,
    sample_labels,
    train_feature_classifier,
)
from .numeric import InvalidParameterError, InvalidStateError, NumericError, RngStream
from .trainer import SubsetLoader, format_record, init_state, pretrain_discriminators, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("efdp_gan")


class DataError(RuntimeError):
    pass


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.updated(seed=args.seed)
    return cfg


def _load_data(images, labels, n_classes: int) -> LabeledDataset:
    for p in (images, labels):
        if p is None:
            raise DataError("--dataset-images and --dataset-labels are required")
        if not Path(p).exists():
            raise DataError(f"dataset file not found: {p}")
    return load_dataset(images, labels, n_classes)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(record: dict) -> None:
    print(format_record(record))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    ds = synth_dataset(SynthLayout(args.classes, args.per_class, args.size, args.size), args.seed)
    write_idx(out / "images.idx", ds.images, "images")
    write_idx(out / "labels.idx", ds.labels, "labels")
    _emit({"samples": len(ds), "classes": ds.n_classes, "seed": args.seed})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_data(args.dataset_images, args.dataset_labels, cfg.n_classes)
    out = _out_dir(args.out)
    save_config(cfg, out / "config.toml")
    print(f"seed={cfg.seed}")
    state = init_state(cfg, ds)
    bank, losses = pretrain_discriminators(ds, state.subsets, cfg, state.bundle.generator,
                                           state.bundle.discriminators, SubsetLoader(ds, state.subsets))
    for i, loss in enumerate(losses):
        _emit({"subset": i, "loss_d": loss})
    ckpt.save_bank(bank, cfg, out / "bank.ckpt", losses)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        state, cfg = ckpt.load_run(args.resume)
        if args.seed is not None and args.seed != cfg.seed:
            raise ConfigError("--seed conflicts with the resumed run's seed")
        if args.config:
            overrides = load_config(args.config)
            if overrides.updated(iterations=cfg.iterations).digest() != cfg.digest():
                raise ConfigError("resumed run config differs from --config beyond 'iterations'")
            cfg = cfg.updated(iterations=overrides.iterations)
    else:
        state, cfg = None, _resolve_config(args)
    ds = _load_data(args.dataset_images, args.dataset_labels, cfg.n_classes)
    out = _out_dir(args.out)
    public, private = _out_dir(out / "public"), _out_dir(out / "private")
    save_config(cfg, out / "config.toml")
    print(f"seed={cfg.seed}")

    bank = ckpt.load_bank(args.bank) if args.bank and state is None else None
    mode = "a" if args.resume else "w"
    with open(private / "metrics.log", mode) as log_file:
        result = train(cfg, ds, state=state, bank=bank, pretrain=not args.no_pretrain, log_file=log_file,
                       until=args.until)
    ckpt.save_run(result.state, cfg, private / "run.ckpt")
    eps = result.state.epsilon(cfg.delta)
    ckpt.save_generator(result.generator, result.ledger, cfg, public / "generator.ckpt", eps)
    (public / "privacy.json").write_text(json.dumps(
        {"epsilon": eps, "delta": cfg.delta, "steps": result.ledger.steps, "sigma": cfg.sigma,
         "gamma": cfg.sampling_rate}, indent=2))
    _emit({"iterations": result.state.iteration, "stopped_by_budget": int(result.stopped_by_budget),
           "epsilon": eps, "delta": cfg.delta})
    return EXIT_OK


def cmd_generate(args) -> int:
    gen, ledger, cfg = ckpt.load_generator(args.checkpoint)
    out = _out_dir(args.out)
    seed = cfg.seed if args.seed is None else args.seed
    print(f"seed={seed}")
    rng = RngStream(seed, "generate")
    labels = sample_labels(args.count, gen.arch.n_classes, rng.spawn("labels"))
    if args.count:
        images = generator_sampler(gen, cfg.noise)(labels, rng.spawn("images"))
    else:
        images = np.zeros((0, gen.arch.image_size, gen.arch.image_size))
    write_idx(out / "images.idx", images, "images")
    write_idx(out / "labels.idx", labels, "labels")
    _emit({"count": args.count, **{f"class_{c}": int(n) for c, n in
                                   enumerate(np.bincount(labels, minlength=gen.arch.n_classes))}})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    real = _load_data(args.dataset_images, args.dataset_labels, cfg.n_classes)
    if args.checkpoint:
        gen, _, gcfg = ckpt.load_generator(args.checkpoint)
        rng = RngStream(cfg.seed, "eval")
        sampler = generator_sampler(gen, gcfg.noise)
        labels = sample_labels(len(real), gen.arch.n_classes, rng.spawn("labels"))
        samples = LabeledDataset(sampler(labels, rng.spawn("images")), labels, cfg.n_classes)
    else:
        samples = _load_data(args.samples_images, args.samples_labels, cfg.n_classes)
        sampler = None
    fc = train_feature_classifier(real)
    fd = frechet_distance(feature_stats(samples.images, "classifier_penultimate", fc),
                          feature_stats(real.images, "classifier_penultimate", fc))
    record = {"fd": fd, "is": inception_style_score(samples.images, fc)}
    if args.test_images:
        test = _load_data(args.test_images, args.test_labels, cfg.n_classes)
        if sampler is None:
            pool = samples

            def sampler(lbls, rng, pool=pool):
                out = np.empty((len(lbls),) + pool.image_shape)
                for c in np.unique(lbls):
                    idx = np.flatnonzero(pool.labels == c)
                    out[lbls == c] = pool.images[idx[rng.integers(len(idx), size=int(np.sum(lbls == c)))]]
                return out
        for probe in ("mlp", "cnn"):
            record[f"g2r_{probe}"] = gen2real(sampler, cfg.n_classes, len(real), test, probe, cfg.seed)
    _emit(record)
    return EXIT_OK


def _parse_orders(text: str | None):
    if not text:
        return DEFAULT_ORDERS
    orders = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            orders.extend(range(int(lo), int(hi) + 1))
        else:
            orders.append(int(part))
    return tuple(sorted(set(orders)))


def cmd_account(args) -> int:
    orders = _parse_orders(args.orders)
    if args.target_eps is not None:
        steps = steps_for_budget(DpBudget(args.target_eps, args.delta), args.sigma, args.gamma, orders)
    elif args.steps is not None:
        steps = args.steps
    else:
        raise ConfigError("give --steps or --target-eps")
    ledger = RdpLedger(args.sigma, args.gamma, orders, steps)
    eps, best = conversion(ledger.eps_per_order, orders, args.delta)
    print("order\trdp_eps")
    for o, e in zip(orders, ledger.eps_per_order):
        print(f"{o:g}\t{e:.10g}")
    print(json.dumps({"sigma": args.sigma, "gamma": args.gamma, "steps": steps, "delta": args.delta,
                      "epsilon": eps, "best_order": best}))
    _emit({"steps": steps, "epsilon": eps, "delta": args.delta})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efdp-gan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--out", default="out", help="output directory")
        if data:
            p.add_argument("--dataset-images")
            p.add_argument("--dataset-labels")

    p = sub.add_parser("synth", help="write a synthetic IDX dataset")
    p.add_argument("--out", default="data")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain the critic bank")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="private generator training")
    common(p)
    p.add_argument("--resume", help="private run checkpoint to continue from")
    p.add_argument("--bank", help="pretrained critic bank (skips inline pretraining)")
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--until", type=int, help="stop after this iteration (for staged runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample labelled images from a released generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="FD / IS / gen2real against real data")
    common(p)
    p.add_argument("--checkpoint", help="released generator to sample from")
    p.add_argument("--samples-images")
    p.add_argument("--samples-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("account", help="RDP budget table")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--target-eps", type=float)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--orders", help="e.g. '2-64,128,256'")
    p.set_defaults(func=cmd_account)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IdxFormatError, ckpt.CheckpointFormatError, FileNotFoundError, InvalidStateError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
