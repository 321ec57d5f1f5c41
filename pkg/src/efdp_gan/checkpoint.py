"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"EFDPCKPT"
    version    u16
    digest     32 bytes sha256 of the config section payload
    count      u32      number of sections
    section*   name_len u16, name utf-8, kind u8 (0 json, 1 float64 array),
               payload_len u64, crc32 u32, payload

Array payloads are ``ndim u32, dims u64 * ndim, data float64`` (little-endian).
Two kinds of file exist: ``run`` (full resumable training state, private) and
``generator`` (the releasable generator plus its privacy ledger).
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .accountant import RdpLedger
from .config import TrainConfig, config_from_dict
from .models import (
    ClassifierNet,
    DiscriminatorArch,
    DiscriminatorBank,
    DiscriminatorNet,
    EncoderNet,
    GeneratorArch,
    GeneratorNet,
    MLPArch,
    ModelBundle,
)
from .numeric import ParamVector, RngStream
from .sanitizer import EfState

MAGIC = b"EFDPCKPT"
VERSION = 1
_JSON, _ARRAY = 0, 1

REQUIRED = {
    "run": ("meta", "config", "descriptors", "param/generator", "ef_meta", "ledger", "rng", "partition"),
    "generator": ("meta", "config", "descriptors", "param/generator", "ledger"),
    "bank": ("meta", "config", "descriptors"),
}


class CheckpointFormatError(ValueError):
    pass


def _encode_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def _decode_array(raw: bytes, name: str) -> np.ndarray:
    try:
        (ndim,) = struct.unpack_from("<I", raw, 0)
        dims = struct.unpack_from(f"<{ndim}Q", raw, 4)
    except struct.error as exc:
        raise CheckpointFormatError(f"section {name!r}: bad array header") from exc
    off = 4 + 8 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(raw) != off + 8 * count:
        raise CheckpointFormatError(f"section {name!r}: array payload has wrong length")
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def write_sections(path, sections: dict, config_payload: bytes) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    out += hashlib.sha256(config_payload).digest()
    out += struct.pack("<I", len(sections))
    for name, value in sections.items():
        if isinstance(value, np.ndarray):
            kind, payload = _ARRAY, _encode_array(value)
        elif isinstance(value, bytes):
            kind, payload = _JSON, value
        else:
            kind, payload = _JSON, json.dumps(value, sort_keys=True).encode()
        encoded = name.encode()
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<BQI", kind, len(payload), zlib.crc32(payload))
        out += payload
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def read_sections(path, kind: str | None = None) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 46 or raw[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = raw[10:42]
    (count,) = struct.unpack_from("<I", raw, 42)
    off = 46
    sections = {}
    payloads = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2: off + 2 + nlen].decode()
            off += 2 + nlen
            skind, plen, crc = struct.unpack_from("<BQI", raw, off)
            off += 13
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"truncated or corrupt section header at byte {off}") from exc
        payload = raw[off: off + plen]
        if len(payload) != plen:
            raise CheckpointFormatError(f"section {name!r} truncated")
        if zlib.crc32(payload) != crc:
            raise CheckpointFormatError(f"section {name!r} failed its checksum")
        off += plen
        payloads[name] = payload
        if skind == _ARRAY:
            sections[name] = _decode_array(payload, name)
        elif skind == _JSON:
            sections[name] = json.loads(payload)
        else:
            raise CheckpointFormatError(f"section {name!r} has unknown kind {skind}")
    if off != len(raw):
        raise CheckpointFormatError("trailing bytes after last section")
    if "config" not in payloads or hashlib.sha256(payloads["config"]).digest() != digest:
        raise CheckpointFormatError("config digest mismatch")
    file_kind = sections.get("meta", {}).get("kind")
    if kind is not None and file_kind != kind:
        raise CheckpointFormatError(f"expected a {kind!r} checkpoint, found {file_kind!r}")
    missing = [s for s in REQUIRED.get(file_kind, ("meta",)) if s not in sections]
    if missing:
        raise CheckpointFormatError(f"missing required sections: {', '.join(missing)}")
    return sections


def _config_payload(cfg: TrainConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True).encode()


def _pv_segments(arch_segments):
    return [(n, tuple(s)) for n, s in arch_segments]


def _generator_arch(d: dict) -> GeneratorArch:
    return GeneratorArch(**{**d, "stage_channels": tuple(d["stage_channels"])})


def _mlp_arch(d: dict) -> MLPArch:
    return MLPArch(tuple(d["sizes"]), d["activation"], d["output"])


# ---------------------------------------------------------------------------
# full run state
# ---------------------------------------------------------------------------

def save_run(state, cfg: TrainConfig, path) -> None:
    b = state.bundle
    sections: dict = {
        "meta": {"kind": "run", "iteration": state.iteration},
        "config": _config_payload(cfg),
        "descriptors": b.descriptors(),
        "param/generator": b.generator.params.data,
        "param/classifier": b.classifier.params.data,
        "param/encoder": b.encoder.params.data,
    }
    for i, d in enumerate(b.discriminators.nets):
        sections[f"param/disc/{i}"] = d.params.data
    sections["bank_assignment"] = {str(k): v for k, v in b.discriminators.assignment.items()}
    for j, (c, e) in enumerate(state.aux):
        sections[f"param/aux_classifier/{j}"] = c.params.data
        sections[f"param/aux_encoder/{j}"] = e.params.data
    sections["ef_meta"] = {"step": state.ef.step, "mode": state.ef.mode, "sources": list(state.ef.errors)}
    for s, e in state.ef.errors.items():
        sections[f"ef/{s}"] = e
    sections["ledger"] = _ledger_dict(state.ledger)
    sections["rng"] = {k: r.get_state() for k, r in state.rngs.items()}
    sections["partition"] = [p.tolist() for p in state.subsets]
    write_sections(path, sections, sections["config"])


def _ledger_dict(ledger: RdpLedger) -> dict:
    return {"sigma": ledger.sigma, "gamma": ledger.gamma, "orders": list(ledger.orders), "steps": ledger.steps}


def _ledger_from(d: dict) -> RdpLedger:
    return RdpLedger(d["sigma"], d["gamma"], tuple(d["orders"]), int(d["steps"]))


def _get(sections, name):
    if name not in sections:
        raise CheckpointFormatError(f"missing required section {name!r}")
    return sections[name]


def load_run(path):
    """Return ``(RunState, TrainConfig)``."""
    from .trainer import RunState

    sec = read_sections(path, "run")
    cfg = config_from_dict(_get(sec, "config"))
    desc = _get(sec, "descriptors")
    garch = _generator_arch(desc["generator"])
    darch = DiscriminatorArch(**desc["discriminator"])
    carch, earch = _mlp_arch(desc["classifier"]), _mlp_arch(desc["encoder"])
    gen = GeneratorNet(garch, ParamVector(_pv_segments(garch.segments()), _get(sec, "param/generator")))
    nets = [DiscriminatorNet(darch, ParamVector(darch.segments(), _get(sec, f"param/disc/{i}")))
            for i in range(desc["k"])]
    assignment = {int(k): v for k, v in _get(sec, "bank_assignment").items()}
    bundle = ModelBundle(
        gen,
        DiscriminatorBank(darch, nets, assignment),
        ClassifierNet(carch, ParamVector(carch.segments(), _get(sec, "param/classifier"))),
        EncoderNet(earch, ParamVector(earch.segments(), _get(sec, "param/encoder"))),
    )
    aux = []
    j = 0
    while f"param/aux_classifier/{j}" in sec:
        aux.append((ClassifierNet(carch, ParamVector(carch.segments(), sec[f"param/aux_classifier/{j}"])),
                    EncoderNet(earch, ParamVector(earch.segments(), _get(sec, f"param/aux_encoder/{j}")))))
        j += 1
    meta = _get(sec, "ef_meta")
    ef = EfState({s: _get(sec, f"ef/{s}") for s in meta["sources"]}, int(meta["step"]), meta["mode"])
    state = RunState(
        bundle=bundle,
        ef=ef,
        ledger=_ledger_from(_get(sec, "ledger")),
        iteration=int(sec["meta"]["iteration"]),
        rngs={k: RngStream.from_state(v) for k, v in _get(sec, "rng").items()},
        subsets=[np.asarray(p, dtype=np.int64) for p in _get(sec, "partition")],
        aux=aux,
    )
    if state.iteration != state.ledger.steps:
        raise CheckpointFormatError("iteration counter disagrees with ledger steps")
    return state, cfg


# ---------------------------------------------------------------------------
# released generator
# ---------------------------------------------------------------------------

def save_generator(generator: GeneratorNet, ledger: RdpLedger, cfg: TrainConfig, path,
                   epsilon: float | None = None) -> None:
    """Write the public artifact: generator parameters, its architecture and the privacy ledger."""
    from dataclasses import asdict

    sections = {
        "meta": {"kind": "generator", "epsilon": epsilon, "delta": cfg.delta},
        "config": _config_payload(cfg),
        "descriptors": {"generator": asdict(generator.arch)},
        "param/generator": generator.params.data,
        "ledger": _ledger_dict(ledger),
    }
    write_sections(path, sections, sections["config"])


def load_generator(path):
    """Return ``(GeneratorNet, RdpLedger, TrainConfig)``."""
    sec = read_sections(path, "generator")
    garch = _generator_arch(sec["descriptors"]["generator"])
    gen = GeneratorNet(garch, ParamVector(_pv_segments(garch.segments()), sec["param/generator"]))
    return gen, _ledger_from(sec["ledger"]), config_from_dict(sec["config"])


# ---------------------------------------------------------------------------
# pretrained critic bank
# ---------------------------------------------------------------------------

def save_bank(bank: DiscriminatorBank, cfg: TrainConfig, path, losses=None) -> None:
    from dataclasses import asdict

    sections = {
        "meta": {"kind": "bank", "k": len(bank), "losses": list(losses or [])},
        "config": _config_payload(cfg),
        "descriptors": {"discriminator": asdict(bank.arch), "k": len(bank)},
        "bank_assignment": {str(k): v for k, v in bank.assignment.items()},
    }
    for i, d in enumerate(bank.nets):
        sections[f"param/disc/{i}"] = d.params.data
    write_sections(path, sections, sections["config"])


def load_bank(path) -> DiscriminatorBank:
    sec = read_sections(path, "bank")
    darch = DiscriminatorArch(**sec["descriptors"]["discriminator"])
    nets = [DiscriminatorNet(darch, ParamVector(darch.segments(), _get(sec, f"param/disc/{i}")))
            for i in range(sec["descriptors"]["k"])]
    assignment = {int(k): v for k, v in _get(sec, "bank_assignment").items()}
    return DiscriminatorBank(darch, nets, assignment)
