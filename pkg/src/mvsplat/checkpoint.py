"""Versioned binary checkpoint container.

Layout (little-endian throughout):

    magic   b"MVGS-CKPT"
    version u32
    count   u32                      number of sections
    per section:
        name_len u16, name utf-8
        payload_len u64, payload

Array payloads carry their own header (dtype string, shape) so readers
never guess; JSON payloads hold scalar state. Unknown sections are ignored
on read, which keeps the format forward-compatible.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianCloud, InvalidInputError
from .regularizers import LossWeights
from .surface import SurfaceCloud
from .trainer import OptimizerState

MAGIC = b"MVGS-CKPT"
VERSION = 1

_ARRAY_TAG = b"ARR1"


class CheckpointError(RuntimeError):
    pass


def _encode_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<")
    a = a.astype(dt, copy=False)
    dts = dt.str.encode()
    head = _ARRAY_TAG + struct.pack("<B", len(dts)) + dts
    head += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _decode_array(buf: bytes) -> np.ndarray:
    if buf[:4] != _ARRAY_TAG:
        raise CheckpointError("section is not an array payload")
    off = 4
    (dlen,) = struct.unpack_from("<B", buf, off)
    off += 1
    dt = np.dtype(buf[off:off + dlen].decode())
    off += dlen
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    return np.frombuffer(buf[off:], dtype=dt).reshape(shape).copy()


def _write_sections(fh, sections: dict) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections.items():
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def _read_sections(fh) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    version, count = struct.unpack("<II", fh.read(8))
    if version > VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode()
        (plen,) = struct.unpack("<Q", fh.read(8))
        sections[name] = fh.read(plen)
    return sections


@dataclass
class TrainerCheckpoint:
    """Everything needed to resume a run bit-exactly."""
    cloud: GaussianCloud
    step: int
    eta: np.ndarray
    opt_state: dict = field(default_factory=dict)    # name -> (m, v), plus "t"
    rng_state: dict | None = None
    surface_points: np.ndarray | None = None
    surface_built_step: int = -1
    config_json: str = ""


def save_checkpoint(path, cloud: GaussianCloud, step: int,
                    weights: LossWeights | None = None,
                    opt: OptimizerState | None = None,
                    rng: np.random.Generator | None = None,
                    surface: SurfaceCloud | None = None,
                    config_json: str = "") -> None:
    sections = {}
    for name in GaussianCloud.PARAM_GROUPS:
        sections[f"cloud.{name}"] = _encode_array(getattr(cloud, name))
    sections["cloud.grad_accum"] = _encode_array(cloud.grad_accum)
    sections["cloud.grad_count"] = _encode_array(cloud.grad_count)
    sections["cloud.ids"] = _encode_array(cloud.ids)
    meta = {
        "step": int(step),
        "id_counter": int(cloud.id_counter),
        "opt_t": int(opt.t) if opt is not None else 0,
        "surface_built_step": int(surface.built_step) if surface is not None else -1,
    }
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    sections["meta"] = json.dumps(meta).encode()
    if weights is not None:
        sections["eta"] = _encode_array(weights.eta)
    if opt is not None:
        for name in list(opt.m):
            sections[f"opt.m.{name}"] = _encode_array(opt.m[name])
            sections[f"opt.v.{name}"] = _encode_array(opt.v[name])
    if surface is not None and len(surface) > 0:
        sections["surface.points"] = _encode_array(surface.points)
    if config_json:
        sections["config"] = config_json.encode()
    with open(path, "wb") as fh:
        _write_sections(fh, sections)


def load_checkpoint(path) -> TrainerCheckpoint:
    with open(path, "rb") as fh:
        sections = _read_sections(fh)
    try:
        meta = json.loads(sections["meta"].decode())
        arrays = {name: _decode_array(sections[f"cloud.{name}"])
                  for name in GaussianCloud.PARAM_GROUPS}
        cloud = GaussianCloud(
            **arrays,
            grad_accum=_decode_array(sections["cloud.grad_accum"]),
            grad_count=_decode_array(sections["cloud.grad_count"]),
            ids=_decode_array(sections["cloud.ids"]),
            id_counter=meta["id_counter"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing section {exc}") from exc

    eta = (_decode_array(sections["eta"]) if "eta" in sections else np.zeros(3))
    opt_state = {"t": meta.get("opt_t", 0)}
    for name in list(OptimizerState.CLOUD_GROUPS) + ["eta"]:
        mk, vk = f"opt.m.{name}", f"opt.v.{name}"
        if mk in sections:
            opt_state[name] = (_decode_array(sections[mk]), _decode_array(sections[vk]))
    surface_points = (_decode_array(sections["surface.points"])
                      if "surface.points" in sections else None)
    return TrainerCheckpoint(
        cloud=cloud, step=meta["step"], eta=eta, opt_state=opt_state,
        rng_state=meta.get("rng_state"), surface_points=surface_points,
        surface_built_step=meta.get("surface_built_step", -1),
        config_json=sections.get("config", b"").decode())


def restore_trainer(trainer, ckpt: TrainerCheckpoint) -> None:
    """Load checkpoint state into a freshly constructed Trainer."""
    trainer.cloud = ckpt.cloud
    trainer.weights = LossWeights(eta=ckpt.eta.copy())
    trainer.opt = OptimizerState(ckpt.cloud)
    trainer.opt.t = ckpt.opt_state.get("t", 0)
    for name, value in ckpt.opt_state.items():
        if name == "t":
            continue
        trainer.opt.m[name], trainer.opt.v[name] = value
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    if ckpt.surface_points is not None:
        trainer.surface = SurfaceCloud(points=ckpt.surface_points,
                                       built_step=ckpt.surface_built_step)
    trainer.step_count = ckpt.step
