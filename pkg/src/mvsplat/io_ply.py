"""Binary PLY interchange using the common splat-viewer vertex layout.

Colors are written as degree-0 spherical-harmonic coefficients
(f_dc = (c - 0.5) / C0 with C0 = 1/(2 sqrt(pi))), opacities as logits and
scales as logs, so exports open directly in third-party splat viewers and
import is the exact inverse.
"""
from __future__ import annotations

import numpy as np

from .core import GaussianCloud

SH_C0 = 0.28209479177387814

PLY_FIELDS = [
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]


class PlyFormatError(ValueError):
    pass


def export_ply(cloud: GaussianCloud, path) -> None:
    n = len(cloud)
    data = np.empty(n, dtype=[(name, "<f4") for name in PLY_FIELDS])
    data["x"], data["y"], data["z"] = cloud.centers.T.astype(np.float32)
    fdc = ((cloud.colors - 0.5) / SH_C0).astype(np.float32)
    data["f_dc_0"], data["f_dc_1"], data["f_dc_2"] = fdc.T
    data["opacity"] = cloud.logit_opacities.astype(np.float32)
    logs = cloud.log_scales.astype(np.float32)
    data["scale_0"], data["scale_1"], data["scale_2"] = logs.T
    q = cloud.quats.astype(np.float32)
    data["rot_0"], data["rot_1"], data["rot_2"], data["rot_3"] = q.T

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def import_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError("not a PLY file (missing header)")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    if "format binary_little_endian 1.0" not in header[1:3]:
        raise PlyFormatError("expected format binary_little_endian 1.0")
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("element "):
            raise PlyFormatError(f"unsupported element: {line!r}")
        elif line.startswith("property"):
            parts = line.split()
            if parts[1] != "float":
                raise PlyFormatError(f"unsupported property type: {line!r}")
            props.append(parts[2])
    if n is None:
        raise PlyFormatError("missing 'element vertex' declaration")
    missing = [p for p in PLY_FIELDS if p not in props]
    extra = [p for p in props if p not in PLY_FIELDS]
    if missing or extra:
        raise PlyFormatError(
            f"vertex property mismatch; missing={missing} unexpected={extra}")

    dtype = np.dtype([(p, "<f4") for p in props])
    if len(body) < n * dtype.itemsize:
        raise PlyFormatError("truncated vertex data")
    data = np.frombuffer(body[: n * dtype.itemsize], dtype=dtype)

    centers = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(float)
    colors = np.stack([data["f_dc_0"], data["f_dc_1"], data["f_dc_2"]],
                      axis=1).astype(float) * SH_C0 + 0.5
    log_scales = np.stack([data["scale_0"], data["scale_1"], data["scale_2"]],
                          axis=1).astype(float)
    quats = np.stack([data["rot_0"], data["rot_1"], data["rot_2"], data["rot_3"]],
                     axis=1).astype(float)
    return GaussianCloud(centers=centers, log_scales=log_scales, quats=quats,
                         colors=colors,
                         logit_opacities=data["opacity"].astype(float))
