"""Patch-based splat decoding: corner features, learned UV weights, UV sampling.

A patch is a chart over the unit square with feature vectors pinned at the
four corners (0,0), (1,0), (1,1), (0,1). Any UV query point decodes to one 3D
Gaussian: a softmax over corner affinities blends the corner features, a
position head emits an offset from the patch center, and an attribute head
emits scale/rotation/opacity/color pre-activations. Decoding is pointwise in
UV, so the splat count is a free sampling choice and the parameter count
depends only on the feature width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn as torch_nn

from . import plyio
from .nn import MLP
from .util import DataError, assert_finite

UV_CORNERS = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))


@dataclass
class Patch:
    """One chart: center in scene units plus 4 x d geometry/appearance features."""

    center: torch.Tensor
    geom: torch.Tensor
    app: torch.Tensor

    def __post_init__(self) -> None:
        if self.center.shape != (3,):
            raise DataError(f"patch center must be (3,), got {tuple(self.center.shape)}")
        if self.geom.dim() != 2 or self.geom.shape[0] != 4 or self.app.shape != self.geom.shape:
            raise DataError("patch features must both be (4, d)")


@dataclass
class PatchSet:
    """Batched patches: centers (M, 3), geom/app features (M, 4, d)."""

    centers: torch.Tensor
    geom: torch.Tensor
    app: torch.Tensor

    def __post_init__(self) -> None:
        m = self.centers.shape[0]
        if self.centers.shape != (m, 3) or self.geom.shape[:2] != (m, 4) \
                or self.app.shape != self.geom.shape:
            raise DataError("inconsistent patch set shapes")

    def __len__(self) -> int:
        return self.centers.shape[0]


def as_patch_set(patches: PatchSet | Sequence[Patch]) -> PatchSet:
    if isinstance(patches, PatchSet):
        return patches
    if len(patches) == 0:
        raise DataError("empty patch list")
    return PatchSet(
        centers=torch.stack([p.center for p in patches]),
        geom=torch.stack([p.geom for p in patches]),
        app=torch.stack([p.app for p in patches]),
    )


@dataclass
class Gaussian3D:
    """One splat: position, per-axis scale, unit quaternion, opacity, RGB."""

    mu: torch.Tensor
    scale: torch.Tensor
    rot: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor

    def validate(self) -> "Gaussian3D":
        norm = float(torch.linalg.vector_norm(self.rot.detach()))
        if abs(norm - 1.0) > 1e-6:
            raise DataError(f"quaternion norm {norm} not within 1e-6 of 1")
        if not bool((self.scale > 0).all()):
            raise DataError("scale components must be strictly positive")
        if not (0.0 <= float(self.opacity.detach()) <= 1.0):
            raise DataError("opacity outside [0, 1]")
        if not bool(((self.color >= 0) & (self.color <= 1)).all()):
            raise DataError("color outside [0, 1]")
        return self


class Gaussians:
    """Batched splats; the working currency of the renderer and decoder."""

    def __init__(self, mu: torch.Tensor, scale: torch.Tensor, rot: torch.Tensor,
                 opacity: torch.Tensor, color: torch.Tensor):
        n = mu.shape[0]
        if mu.shape != (n, 3) or scale.shape != (n, 3) or rot.shape != (n, 4) \
                or opacity.shape != (n,) or color.shape != (n, 3):
            raise DataError("inconsistent gaussian field shapes")
        self.mu, self.scale, self.rot, self.opacity, self.color = mu, scale, rot, opacity, color

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mu[i], self.scale[i], self.rot[i],
                          self.opacity[i], self.color[i])

    def fields(self) -> dict[str, torch.Tensor]:
        return {"mu": self.mu, "scale": self.scale, "rot": self.rot,
                "opacity": self.opacity, "color": self.color}

    def detach(self) -> "Gaussians":
        return Gaussians(**{k: v.detach() for k, v in self.fields().items()})

    @staticmethod
    def from_list(splats: Sequence[Gaussian3D]) -> "Gaussians":
        if len(splats) == 0:
            raise DataError("empty gaussian list")
        return Gaussians(
            mu=torch.stack([g.mu for g in splats]),
            scale=torch.stack([g.scale for g in splats]),
            rot=torch.stack([g.rot for g in splats]),
            opacity=torch.stack([torch.as_tensor(g.opacity) for g in splats]),
            color=torch.stack([g.color for g in splats]),
        )

    @staticmethod
    def empty(dtype=None) -> "Gaussians":
        dtype = dtype or torch.get_default_dtype()
        g = Gaussians.__new__(Gaussians)
        g.mu = torch.zeros(0, 3, dtype=dtype)
        g.scale = torch.zeros(0, 3, dtype=dtype)
        g.rot = torch.zeros(0, 4, dtype=dtype)
        g.opacity = torch.zeros(0, dtype=dtype)
        g.color = torch.zeros(0, 3, dtype=dtype)
        return g

    def validate(self) -> "Gaussians":
        norms = torch.linalg.vector_norm(self.rot, dim=-1)
        if not bool(((norms - 1.0).abs() <= 1e-6).all()):
            raise DataError("quaternion norms not within 1e-6 of 1")
        if not bool((self.scale > 0).all()):
            raise DataError("scale components must be strictly positive")
        for name in ("opacity", "color"):
            t = getattr(self, name)
            if not bool(((t >= 0) & (t <= 1)).all()):
                raise DataError(f"{name} outside [0, 1]")
        return self


class PositionalEncoder(torch_nn.Module):
    """sin/cos ladder at octave frequencies 2^k * pi, then an MLP projection.

    ``raw`` exposes the pure sinusoid stage, ordered (sin, cos) per
    (coordinate, frequency) so the origin encodes to (0, 1, 0, 1, ...).
    """

    def __init__(self, in_dim: int, out_dim: int, gen: torch.Generator,
                 freq_count: int = 8):
        super().__init__()
        self.in_dim = in_dim
        freqs = math.pi * (2.0 ** torch.arange(freq_count, dtype=torch.get_default_dtype()))
        self.register_buffer("freqs", freqs)
        self.mlp = MLP([in_dim * 2 * freq_count, out_dim, out_dim], gen)

    def raw(self, p: torch.Tensor) -> torch.Tensor:
        if p.shape[-1] != self.in_dim:
            raise DataError(f"expected last dim {self.in_dim}, got {p.shape[-1]}")
        angles = p[..., :, None] * self.freqs.to(p.dtype)        # (..., in_dim, K)
        enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
        return enc.reshape(*p.shape[:-1], -1)                    # (..., in_dim * 2K)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.raw(p))


def bilinear_corner_weights(q: torch.Tensor) -> torch.Tensor:
    """Classic bilinear weights for the fixed corner order; rows sum to 1."""
    u, v = q[..., 0], q[..., 1]
    return torch.stack([(1 - u) * (1 - v), u * (1 - v), u * v, (1 - u) * v], dim=-1)


class AtlasDecoder(torch_nn.Module):
    """UV-to-Gaussian decoder; parameter count is a function of d only.

    ``weight_mode`` selects the learned softmax corner weights or plain
    bilinear weights; geometry and appearance branches keep separate UV
    encoders unless ``share_weight_encoders`` is set.
    """

    def __init__(self, d: int, gen: torch.Generator, weight_mode: str = "learned",
                 share_weight_encoders: bool = False, freq_count: int = 8):
        super().__init__()
        if weight_mode not in ("learned", "bilinear"):
            raise DataError(f"unknown weight mode {weight_mode!r}")
        self.d = d
        self.weight_mode = weight_mode
        self.geom_encoder = PositionalEncoder(2, d, gen, freq_count)
        self.app_encoder = self.geom_encoder if share_weight_encoders \
            else PositionalEncoder(2, d, gen, freq_count)
        self.position_head = MLP([d, d, 3], gen)
        self.attribute_head = MLP([d, d, 11], gen)
        # start splats small (exp(-3) ~ 0.05 scene units): fresh decoders render
        # stably and the tiled rasterizer can cull from the first step
        with torch.no_grad():
            self.attribute_head.layers[-1].bias[0:3] = -3.0

    def _corners(self, dtype) -> torch.Tensor:
        return torch.tensor(UV_CORNERS, dtype=dtype)

    def corner_logits(self, q: torch.Tensor, features: torch.Tensor,
                      encoder: PositionalEncoder) -> torch.Tensor:
        """Affinity of a query point to the four corners: enc(q) . (f_k + enc(u_k)) / sqrt(d).

        q: (..., 2); features: broadcastable to (..., 4, d). Returns (..., 4).
        """
        assert_finite(features, "corner features")
        enc_q = encoder(q)                                       # (..., d)
        enc_u = encoder(self._corners(q.dtype))                  # (4, d)
        keys = features + enc_u
        return (keys * enc_q[..., None, :]).sum(dim=-1) / math.sqrt(self.d)

    def corner_weights(self, q: torch.Tensor, features: torch.Tensor,
                       branch: str = "geom") -> torch.Tensor:
        """Convex corner weights for blending; strictly positive, rows sum to 1."""
        if self.weight_mode == "bilinear":
            return bilinear_corner_weights(q)
        encoder = self.geom_encoder if branch == "geom" else self.app_encoder
        return torch.softmax(self.corner_logits(q, features, encoder), dim=-1)

    def decode_position(self, q: torch.Tensor, centers: torch.Tensor,
                        geom: torch.Tensor) -> torch.Tensor:
        """Blend geometry corner features and add the decoded offset to the center."""
        w = self.corner_weights(q, geom, branch="geom")          # (..., 4)
        blended = (w[..., None] * geom).sum(dim=-2)              # (..., d)
        return self.position_head(blended) + centers

    def decode_attributes(self, q: torch.Tensor, app: torch.Tensor):
        """Blend appearance features and map through render-safe activations."""
        w = self.corner_weights(q, app, branch="app")
        blended = (w[..., None] * app).sum(dim=-2)
        pre = self.attribute_head(blended)                       # (..., 11)
        scale = torch.exp(pre[..., 0:3]).clamp(1e-6, 1.0)
        quat = pre[..., 3:7] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=pre.dtype)
        quat = quat / torch.linalg.vector_norm(quat, dim=-1, keepdim=True)
        opacity = torch.sigmoid(pre[..., 7])
        color = torch.sigmoid(pre[..., 8:11])
        return scale, quat, opacity, color


def sample_uv_grid(alpha: int) -> torch.Tensor:
    """alpha^2 cell-center UV points ((i+0.5)/a, (j+0.5)/a), row-major in (i, j)."""
    if alpha < 1:
        raise DataError(f"grid resolution must be >= 1, got {alpha}")
    centers = (torch.arange(alpha, dtype=torch.get_default_dtype()) + 0.5) / alpha
    gi, gj = torch.meshgrid(centers, centers, indexing="ij")
    return torch.stack([gi.reshape(-1), gj.reshape(-1)], dim=-1)


def sample_uv_random(count: int, gen: torch.Generator) -> torch.Tensor:
    """count i.i.d. uniform UV points in the unit square; seeded-deterministic."""
    if count < 1:
        raise DataError(f"sample count must be >= 1, got {count}")
    return torch.rand(count, 2, generator=gen)


def decode_atlas(patches: PatchSet | Sequence[Patch], decoder: AtlasDecoder,
                 uv: torch.Tensor) -> Gaussians:
    """Decode every (patch, uv) pair to a splat, patch-major / uv-minor.

    ``uv`` is either (S, 2), shared by all patches, or (M, S, 2) per patch.
    The output has exactly M*S splats; decoding never creates or consumes
    parameters as S varies.
    """
    pset = as_patch_set(patches)
    m = len(pset)
    if uv.dim() == 2:
        uv = uv[None, :, :].expand(m, -1, -1)
    if uv.dim() != 3 or uv.shape[0] != m or uv.shape[1] == 0:
        raise DataError(f"uv must be (S, 2) or (M, S, 2) non-empty, got {tuple(uv.shape)}")
    s = uv.shape[1]
    geom = pset.geom[:, None, :, :]                              # (M, 1, 4, d)
    app = pset.app[:, None, :, :]
    mu = decoder.decode_position(uv, pset.centers[:, None, :], geom)
    scale, quat, opacity, color = decoder.decode_attributes(uv, app)
    return Gaussians(
        mu=mu.reshape(m * s, 3),
        scale=scale.reshape(m * s, 3),
        rot=quat.reshape(m * s, 4),
        opacity=opacity.reshape(m * s),
        color=color.reshape(m * s, 3),
    )


def export_ply(path, gaussians: Gaussians) -> None:
    plyio.write_gaussians(path, gaussians.fields())


def import_ply(path) -> Gaussians:
    return Gaussians(**plyio.read_gaussians(path))


def count_parameters(module: torch_nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
