"""PLY readers/writers for point clouds and Gaussian splats.

Point clouds: float32 x/y/z plus optional uchar red/green/blue, ASCII or
binary little-endian. Splats: binary little-endian with float32 properties
x, y, z, scale_0..2, rot_0..3, opacity, red, green, blue — loadable by common
splat viewers.
"""
from __future__ import annotations

import os

import numpy as np
import torch

from .geometry import PointCloud
from .util import DataError

GAUSSIAN_PROPS = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
]


def write_point_cloud(path: str | os.PathLike, pc: PointCloud, binary: bool = True) -> None:
    pts = pc.points.detach().cpu().numpy().astype("<f4")
    colors = None
    if pc.colors is not None:
        colors = np.clip(np.rint(pc.colors.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(pts)}"]
    header += [f"property float {axis}" for axis in ("x", "y", "z")]
    if colors is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is None:
                fh.write(pts.tobytes())
            else:
                rec = np.dtype([("xyz", "<f4", 3), ("rgb", "|u1", 3)])
                rows = np.empty(len(pts), dtype=rec)
                rows["xyz"] = pts
                rows["rgb"] = colors
                fh.write(rows.tobytes())
        else:
            for i in range(len(pts)):
                row = " ".join(repr(float(v)) for v in pts[i])
                if colors is not None:
                    row += " " + " ".join(str(int(v)) for v in colors[i])
                fh.write((row + "\n").encode("ascii"))


def _parse_header(data: bytes, path: str) -> tuple[str, int, list[tuple[str, str]], int]:
    end = data.find(b"end_header\n")
    if data[:4] != b"ply\n" or end < 0:
        raise DataError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    fmt, count, props = "", -1, []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise DataError(f"{path}: unsupported element {parts[1]!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
    if count < 0:
        raise DataError(f"{path}: missing vertex element")
    return fmt, count, props, end + len(b"end_header\n")


_PLY_NUMPY = {"float": "<f4", "float32": "<f4", "double": "<f8",
              "uchar": "|u1", "uint8": "|u1"}


def read_point_cloud(path: str | os.PathLike) -> PointCloud:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, count, props, body = _parse_header(data, path)
    names = [name for _, name in props]
    if names[:3] != ["x", "y", "z"]:
        raise DataError(f"{path}: expected x/y/z leading properties, got {names}")
    has_color = names[3:6] == ["red", "green", "blue"]
    if fmt == "ascii":
        rows = np.loadtxt(data[body:].decode("ascii").splitlines(), ndmin=2)
        if rows.shape[0] != count:
            raise DataError(f"{path}: vertex count mismatch")
        pts = rows[:, :3].astype(np.float32)
        colors = rows[:, 3:6] / 255.0 if has_color else None
    elif fmt == "binary_little_endian":
        rec = np.dtype([(name, _PLY_NUMPY[kind]) for kind, name in props])
        rows = np.frombuffer(data[body:body + rec.itemsize * count], dtype=rec)
        if rows.shape[0] != count:
            raise DataError(f"{path}: truncated vertex data")
        pts = np.stack([rows["x"], rows["y"], rows["z"]], axis=-1).astype(np.float32)
        colors = (np.stack([rows["red"], rows["green"], rows["blue"]], axis=-1) / 255.0
                  if has_color else None)
    else:
        raise DataError(f"{path}: unsupported format {fmt!r}")
    return PointCloud(
        points=torch.from_numpy(pts.copy()),
        colors=None if colors is None else torch.from_numpy(colors.astype(np.float32)),
    )


def write_gaussians(path: str | os.PathLike, fields: dict[str, torch.Tensor]) -> None:
    """Write splats given field tensors mu (N,3), scale (N,3), rot (N,4),
    opacity (N,), color (N,3)."""
    mu = fields["mu"].detach().cpu().numpy()
    n = mu.shape[0]
    cols = np.concatenate(
        [
            mu,
            fields["scale"].detach().cpu().numpy(),
            fields["rot"].detach().cpu().numpy(),
            fields["opacity"].detach().cpu().numpy().reshape(n, 1),
            fields["color"].detach().cpu().numpy(),
        ],
        axis=1,
    ).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in GAUSSIAN_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(cols.tobytes())


def read_gaussians(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, count, props, body = _parse_header(data, path)
    names = [name for _, name in props]
    if fmt != "binary_little_endian" or names != GAUSSIAN_PROPS:
        raise DataError(f"{path}: not a splat PLY (properties {names})")
    arr = np.frombuffer(data[body:body + 4 * len(names) * count], dtype="<f4")
    if arr.size != len(names) * count:
        raise DataError(f"{path}: truncated vertex data")
    arr = arr.reshape(count, len(names)).copy()
    t = torch.from_numpy(arr)
    return {
        "mu": t[:, 0:3],
        "scale": t[:, 3:6],
        "rot": t[:, 6:10],
        "opacity": t[:, 10],
        "color": t[:, 11:14],
    }
