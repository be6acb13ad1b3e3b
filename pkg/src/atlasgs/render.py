"""Differentiable software splatting: projection, tiled rasterizer, naive oracle.

Splats are projected with a first-order (EWA-style) linearization of the
pinhole camera, floored at +0.3 px in screen space, then alpha-composited
front to back with a global stable depth sort. The tiled path and the naive
per-pixel reference implement the same math, including the 1/255 contribution
skip, so their outputs agree to float tolerance.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import torch

from .util import DataError

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
COV2D_FLOOR = 0.3
CULL_SIGMA = 3.5  # > sqrt(2 ln 255): beyond this Mahalanobis radius alpha < 1/255
WHITE = (1.0, 1.0, 1.0)


@dataclass
class Camera:
    """Pinhole intrinsics plus a world-to-camera rigid transform.

    ``rotation`` (3, 3) and ``translation`` (3,) map world points p to camera
    space as R p + t, with x right, y down, z forward (depth).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: torch.Tensor
    translation: torch.Tensor
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise DataError(f"need 0 < near < far, got {self.near}, {self.far}")
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.get_default_dtype())
        self.translation = torch.as_tensor(self.translation, dtype=torch.get_default_dtype())
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise DataError("rotation must be (3, 3) and translation (3,)")

    @staticmethod
    def look_at(eye, target, fx: float, fy: float, cx: float, cy: float,
                width: int, height: int, near: float = 0.1, far: float = 10.0,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = torch.as_tensor(eye, dtype=torch.get_default_dtype())
        target = torch.as_tensor(target, dtype=torch.get_default_dtype())
        up = torch.as_tensor(up, dtype=torch.get_default_dtype())
        forward = target - eye
        forward = forward / torch.linalg.vector_norm(forward)
        right = torch.linalg.cross(forward, up)
        norm = torch.linalg.vector_norm(right)
        if float(norm) < 1e-8:
            raise DataError("look_at degenerate: view direction parallel to up")
        right = right / norm
        down = torch.linalg.cross(forward, right)
        rotation = torch.stack([right, down, forward], dim=0)
        translation = -(rotation @ eye)
        return Camera(fx, fy, cx, cy, width, height, rotation, translation, near, far)

    def to_json(self) -> dict:
        w2c = torch.cat([self.rotation, self.translation[:, None]], dim=1)
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": [float(v) for v in w2c.reshape(-1)],
            "near": self.near, "far": self.far,
        }

    @staticmethod
    def from_json(obj: dict) -> "Camera":
        try:
            w2c = torch.tensor(obj["world_to_camera"],
                               dtype=torch.get_default_dtype()).reshape(3, 4)
            return Camera(
                fx=float(obj["fx"]), fy=float(obj["fy"]),
                cx=float(obj["cx"]), cy=float(obj["cy"]),
                width=int(obj["width"]), height=int(obj["height"]),
                rotation=w2c[:, :3].contiguous(), translation=w2c[:, 3].contiguous(),
                near=float(obj["near"]), far=float(obj["far"]),
            )
        except (KeyError, ValueError, RuntimeError) as exc:
            raise DataError(f"bad camera record: {exc}") from exc


def save_cameras(path: str | os.PathLike, cameras: list[Camera]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump([c.to_json() for c in cameras], fh, indent=1)


def load_cameras(path: str | os.PathLike) -> list[Camera]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "r", encoding="ascii") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(raw, dict):
        raw = [raw]
    return [Camera.from_json(obj) for obj in raw]


@dataclass
class RenderOutput:
    rgb: torch.Tensor    # (H, W, 3) in [0, 1]
    alpha: torch.Tensor  # (H, W) in [0, 1]
    depth: torch.Tensor  # (H, W) alpha-weighted expected camera depth


def quat_to_rotation(r: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) to rotation matrix; batched over leading dims."""
    norm = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if bool((norm < 1e-8).any()):
        raise DataError("zero quaternion has no rotation")
    q = r / norm
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def covariance_3d(scale: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    """World covariance R diag(s)^2 R^T from per-axis scales and a quaternion."""
    rmat = quat_to_rotation(rot)
    return rmat @ torch.diag_embed(scale * scale) @ rmat.transpose(-1, -2)


def project_gaussian(mu: torch.Tensor, cov: torch.Tensor, cam: Camera):
    """Project world means/covariances to screen space.

    Returns (mean2d, cov2d, depth, visible). ``cov2d`` includes the +0.3 px
    floor. A splat is invisible when its camera depth leaves (near, far) or
    its projected mean falls outside the image by more than its own cull
    radius (3.5 sigma of the projected footprint).
    """
    squeeze = mu.dim() == 1
    if squeeze:
        mu, cov = mu[None], cov[None]
    rot = cam.rotation.to(mu.dtype)
    trans = cam.translation.to(mu.dtype)
    x_cam = mu @ rot.T + trans
    depth = x_cam[:, 2]
    in_depth = (depth > cam.near) & (depth < cam.far)
    z = torch.where(in_depth, depth, torch.ones_like(depth))
    px = cam.fx * x_cam[:, 0] / z + cam.cx
    py = cam.fy * x_cam[:, 1] / z + cam.cy
    mean2d = torch.stack([px, py], dim=-1)

    inv_z = 1.0 / z
    zeros = torch.zeros_like(z)
    j_row0 = torch.stack([cam.fx * inv_z, zeros, -cam.fx * x_cam[:, 0] * inv_z * inv_z], dim=-1)
    j_row1 = torch.stack([zeros, cam.fy * inv_z, -cam.fy * x_cam[:, 1] * inv_z * inv_z], dim=-1)
    jac = torch.stack([j_row0, j_row1], dim=-2)              # (N, 2, 3)
    cov_cam = rot @ cov @ rot.T
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=mu.dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
    radius = CULL_SIGMA * torch.sqrt(lam_max)
    in_image = (
        (px + radius >= 0.0) & (px - radius <= cam.width)
        & (py + radius >= 0.0) & (py - radius <= cam.height)
    )
    visible = in_depth & in_image
    if squeeze:
        return mean2d[0], cov2d[0], depth[0], bool(visible[0])
    return mean2d, cov2d, depth, visible


def _prepare(gaussians, cam: Camera, keep_offscreen: bool):
    """Project, cull, and depth-sort splats; returns compositing-ready fields."""
    cov = covariance_3d(gaussians.scale, gaussians.rot)
    mean2d, cov2d, depth, visible = project_gaussian(gaussians.mu, cov, cam)
    in_depth = (depth > cam.near) & (depth < cam.far)
    keep = in_depth if keep_offscreen else visible
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return None
    order = torch.argsort(depth[idx], stable=True)
    idx = idx[order]

    cov2d = cov2d[idx]
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if not bool((det > 0).all()):
        raise DataError("singular 2D covariance despite floor")
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
    radius = CULL_SIGMA * torch.sqrt(lam_max)
    return {
        "mean2d": mean2d[idx],
        "conic": conic,
        "radius": radius,
        "depth": depth[idx],
        "color": gaussians.color[idx],
        "opacity": gaussians.opacity[idx],
    }


def _composite(pix: torch.Tensor, fields: dict, select: torch.Tensor | None,
               chunk: int = 4096):
    """Front-to-back blend of (already sorted) splats over pixel sample points.

    pix: (P, 2) pixel centers. Returns per-pixel rgb sum, alpha, depth and
    final transmittance.
    """
    mean2d = fields["mean2d"] if select is None else fields["mean2d"][select]
    conic = fields["conic"] if select is None else fields["conic"][select]
    color = fields["color"] if select is None else fields["color"][select]
    opacity = fields["opacity"] if select is None else fields["opacity"][select]
    depth = fields["depth"] if select is None else fields["depth"][select]

    p = pix.shape[0]
    dtype = pix.dtype
    rgb_acc = torch.zeros(p, 3, dtype=dtype)
    alpha_acc = torch.zeros(p, dtype=dtype)
    depth_acc = torch.zeros(p, dtype=dtype)
    carry = torch.ones(p, dtype=dtype)
    for start in range(0, mean2d.shape[0], chunk):
        end = min(start + chunk, mean2d.shape[0])
        dx = pix[:, 0:1] - mean2d[None, start:end, 0]       # (P, C)
        dy = pix[:, 1:2] - mean2d[None, start:end, 1]
        con = conic[start:end]
        power = -0.5 * (con[None, :, 0] * dx * dx
                        + 2.0 * con[None, :, 1] * dx * dy
                        + con[None, :, 2] * dy * dy)
        alpha = opacity[None, start:end] * torch.exp(power)
        alpha = torch.clamp(alpha, max=ALPHA_CLAMP)
        alpha = torch.where(alpha < ALPHA_SKIP, torch.zeros_like(alpha), alpha)
        trans_incl = torch.cumprod(1.0 - alpha, dim=1)
        trans_excl = torch.cat([torch.ones(p, 1, dtype=dtype), trans_incl[:, :-1]], dim=1)
        weight = alpha * trans_excl * carry[:, None]
        rgb_acc = rgb_acc + weight @ color[start:end]
        alpha_acc = alpha_acc + weight.sum(dim=1)
        depth_acc = depth_acc + weight @ depth[start:end]
        carry = carry * trans_incl[:, -1]
    return rgb_acc, alpha_acc, depth_acc, carry


def _pixel_grid(cam: Camera, dtype) -> torch.Tensor:
    ys = torch.arange(cam.height, dtype=dtype) + 0.5
    xs = torch.arange(cam.width, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def _background(background, dtype) -> torch.Tensor:
    bg = torch.as_tensor(background if background is not None else WHITE, dtype=dtype)
    if bg.shape != (3,):
        raise DataError("background must be an RGB triple")
    return bg


def _empty_output(cam: Camera, bg: torch.Tensor, dtype) -> RenderOutput:
    rgb = bg[None, None, :].expand(cam.height, cam.width, 3).clone()
    zero = torch.zeros(cam.height, cam.width, dtype=dtype)
    return RenderOutput(rgb=rgb, alpha=zero, depth=zero.clone())


def rasterize(gaussians, cam: Camera, background=None, tile: int = 16,
              chunk: int = 4096) -> RenderOutput:
    """Tiled differentiable rasterization with per-tile splat culling."""
    dtype = gaussians.mu.dtype
    bg = _background(background, dtype)
    fields = _prepare(gaussians, cam, keep_offscreen=False)
    if fields is None:
        return _empty_output(cam, bg, dtype)

    h, w = cam.height, cam.width
    mean2d, radius = fields["mean2d"].detach(), fields["radius"].detach()
    row_rgb, row_alpha, row_depth = [], [], []
    for ty in range(0, h, tile):
        y1 = min(ty + tile, h)
        tiles_rgb, tiles_alpha, tiles_depth = [], [], []
        for tx in range(0, w, tile):
            x1 = min(tx + tile, w)
            th, tw = y1 - ty, x1 - tx
            # conservative splat-vs-tile test on pixel sample points
            gap_x = torch.clamp((tx + 0.5) - mean2d[:, 0], min=0.0) \
                + torch.clamp(mean2d[:, 0] - (x1 - 0.5), min=0.0)
            gap_y = torch.clamp((ty + 0.5) - mean2d[:, 1], min=0.0) \
                + torch.clamp(mean2d[:, 1] - (y1 - 0.5), min=0.0)
            hit = gap_x * gap_x + gap_y * gap_y <= radius * radius
            select = torch.nonzero(hit, as_tuple=False).squeeze(-1)
            if select.numel() == 0:
                tiles_rgb.append(bg[None, None, :].expand(th, tw, 3))
                tiles_alpha.append(torch.zeros(th, tw, dtype=dtype))
                tiles_depth.append(torch.zeros(th, tw, dtype=dtype))
                continue
            ys = torch.arange(ty, y1, dtype=dtype) + 0.5
            xs = torch.arange(tx, x1, dtype=dtype) + 0.5
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            pix = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
            rgb_acc, alpha_acc, depth_acc, carry = _composite(pix, fields, select, chunk)
            tiles_rgb.append((rgb_acc + bg[None, :] * carry[:, None]).reshape(th, tw, 3))
            tiles_alpha.append(alpha_acc.reshape(th, tw))
            tiles_depth.append(depth_acc.reshape(th, tw))
        row_rgb.append(torch.cat(tiles_rgb, dim=1))
        row_alpha.append(torch.cat(tiles_alpha, dim=1))
        row_depth.append(torch.cat(tiles_depth, dim=1))
    return RenderOutput(
        rgb=torch.cat(row_rgb, dim=0),
        alpha=torch.cat(row_alpha, dim=0),
        depth=torch.cat(row_depth, dim=0),
    )


def rasterize_reference(gaussians, cam: Camera, background=None) -> RenderOutput:
    """Naive per-pixel oracle: every depth-visible splat blended at every pixel.

    Same compositing math as ``rasterize`` (including the 1/255 skip), no
    tiling or footprint culling; forward only.
    """
    with torch.no_grad():
        dtype = gaussians.mu.dtype
        bg = _background(background, dtype)
        fields = _prepare(gaussians, cam, keep_offscreen=True)
        if fields is None:
            return _empty_output(cam, bg, dtype)
        pix = _pixel_grid(cam, dtype)
        rows_rgb, rows_alpha, rows_depth = [], [], []
        for i in range(pix.shape[0]):
            rgb_acc, alpha_acc, depth_acc, carry = _composite(pix[i:i + 1], fields, None)
            rows_rgb.append(rgb_acc[0] + bg * carry[0])
            rows_alpha.append(alpha_acc[0])
            rows_depth.append(depth_acc[0])
        h, w = cam.height, cam.width
        return RenderOutput(
            rgb=torch.stack(rows_rgb).reshape(h, w, 3),
            alpha=torch.stack(rows_alpha).reshape(h, w),
            depth=torch.stack(rows_depth).reshape(h, w),
        )


def render_loss(pred: RenderOutput, target: RenderOutput, far: float) -> torch.Tensor:
    """MSE over rgb + alpha + far-normalized depth, as used for supervision."""
    rgb = ((pred.rgb - target.rgb) ** 2).mean()
    alpha = ((pred.alpha - target.alpha) ** 2).mean()
    depth = (((pred.depth - target.depth) / far) ** 2).mean()
    return rgb + alpha + depth


def turntable_cameras(count: int, image_size: int, radius: float = 2.5,
                      elevation: float = 0.35) -> list[Camera]:
    """Evenly spaced ring of cameras looking at the origin."""
    cams = []
    for i in range(count):
        angle = 2.0 * math.pi * i / max(count, 1)
        eye = (radius * math.cos(angle), radius * math.sin(angle), elevation * radius)
        cams.append(Camera.look_at(
            eye, (0.0, 0.0, 0.0),
            fx=0.5 * image_size, fy=0.5 * image_size,
            cx=0.5 * image_size, cy=0.5 * image_size,
            width=image_size, height=image_size, near=0.1, far=10.0,
        ))
    return cams
