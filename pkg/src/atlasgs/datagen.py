"""Self-contained synthetic dataset: parametric colored surfaces, teacher
splats, multi-view ground-truth renders, and the on-disk layout.

Every shape is a pure function of (spec, seed): surface samples with analytic
normals and a procedural sinusoidal color field, plus isotropic "teacher"
Gaussians at a farthest-point subsample whose renders supply the RGB / alpha /
depth supervision images. Geometry always lies inside the [-1, 1]^3 cube and
the default camera rig (8 on a radius-2.5 ring plus 2 elevated) keeps it in
frustum.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import torch

from . import imgio, plyio
from .atlas import Gaussians
from .geometry import PointCloud, farthest_point_sampling
from .render import Camera, RenderOutput, rasterize, save_cameras, load_cameras
from .util import DataError, derive_seed, generator
from .vae import ShapeRecordTensors

SHAPE_KINDS = ("sphere", "box", "torus", "superquadric")


@dataclass
class ShapeSpec:
    kind: str
    shape_id: str
    label: int = 0
    n_points: int = 2048
    n_teacher: int = 512
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise DataError(f"unknown shape kind {self.kind!r}; known: {SHAPE_KINDS}")
        if self.n_points < 1 or self.n_teacher < 1:
            raise DataError("sample counts must be positive")


@dataclass
class DatasetRecord:
    shape_id: str
    label: int
    kind: str
    points: PointCloud
    cameras: list
    images: list          # RenderOutput per camera, depth in absolute units
    seed: int = 0


def _sample_sphere(spec: ShapeSpec, gen: torch.Generator) -> torch.Tensor:
    radius = float(spec.params.get("radius", 1.0))
    raw = torch.randn(spec.n_points, 3, generator=gen)
    return radius * raw / torch.linalg.vector_norm(raw, dim=-1, keepdim=True)


def _sample_box(spec: ShapeSpec, gen: torch.Generator) -> torch.Tensor:
    ext = torch.tensor(spec.params.get("extents", (0.9, 0.7, 0.5)),
                       dtype=torch.get_default_dtype())
    areas = torch.tensor([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    areas = areas.repeat_interleave(2)        # faces +x, -x, +y, -y, +z, -z
    face = torch.multinomial(areas / areas.sum(), spec.n_points,
                             replacement=True, generator=gen)
    uv = torch.rand(spec.n_points, 2, generator=gen) * 2.0 - 1.0
    pts = torch.empty(spec.n_points, 3)
    axis = face // 2
    sign = 1.0 - 2.0 * (face % 2).to(pts.dtype)
    for a in range(3):
        mask = axis == a
        others = [b for b in range(3) if b != a]
        pts[mask, a] = sign[mask] * ext[a]
        pts[mask, others[0]] = uv[mask, 0] * ext[others[0]]
        pts[mask, others[1]] = uv[mask, 1] * ext[others[1]]
    return pts


def _sample_torus(spec: ShapeSpec, gen: torch.Generator) -> torch.Tensor:
    big = float(spec.params.get("major_radius", 0.65))
    small = float(spec.params.get("minor_radius", 0.25))
    out = []
    need = spec.n_points
    while need > 0:
        u = torch.rand(2 * need, generator=gen) * (2 * math.pi)
        v = torch.rand(2 * need, generator=gen) * (2 * math.pi)
        # area element scales with (R + r cos v); rejection keeps sampling uniform
        accept = torch.rand(2 * need, generator=gen) \
            <= (big + small * torch.cos(v)) / (big + small)
        u, v = u[accept][:need], v[accept][:need]
        ring = big + small * torch.cos(v)
        out.append(torch.stack([ring * torch.cos(u), ring * torch.sin(u),
                                small * torch.sin(v)], dim=-1))
        need -= u.shape[0]
    return torch.cat(out, dim=0)


def _superquadric_point(eta, omega, ax, eps1, eps2):
    def signed_pow(x, e):
        return torch.sign(x) * torch.abs(x) ** e
    ce, se = torch.cos(eta), torch.sin(eta)
    co, so = torch.cos(omega), torch.sin(omega)
    return torch.stack([
        ax[0] * signed_pow(ce, eps1) * signed_pow(co, eps2),
        ax[1] * signed_pow(ce, eps1) * signed_pow(so, eps2),
        ax[2] * signed_pow(se, eps1),
    ], dim=-1)


def _sample_superquadric(spec: ShapeSpec, gen: torch.Generator) -> torch.Tensor:
    ax = torch.tensor(spec.params.get("axes", (0.9, 0.7, 0.6)),
                      dtype=torch.get_default_dtype())
    eps1 = float(spec.params.get("eps1", 0.8))
    eps2 = float(spec.params.get("eps2", 1.4))

    def area_weight(eta, omega):
        # |d p/d eta x d p/d omega| by central differences; exactness is not
        # needed, only proportionality for rejection
        h = 1e-4
        du = (_superquadric_point(eta + h, omega, ax, eps1, eps2)
              - _superquadric_point(eta - h, omega, ax, eps1, eps2)) / (2 * h)
        dv = (_superquadric_point(eta, omega + h, ax, eps1, eps2)
              - _superquadric_point(eta, omega - h, ax, eps1, eps2)) / (2 * h)
        return torch.linalg.vector_norm(torch.linalg.cross(du, dv), dim=-1)

    probe_eta = torch.linspace(-math.pi / 2 + 0.01, math.pi / 2 - 0.01, 64)
    probe_omega = torch.linspace(-math.pi, math.pi, 64)
    ge, go = torch.meshgrid(probe_eta, probe_omega, indexing="ij")
    bound = float(area_weight(ge.reshape(-1), go.reshape(-1)).max()) * 1.2

    out = []
    need = spec.n_points
    while need > 0:
        eta = (torch.rand(2 * need, generator=gen) - 0.5) * math.pi
        omega = (torch.rand(2 * need, generator=gen) * 2.0 - 1.0) * math.pi
        accept = torch.rand(2 * need, generator=gen) <= area_weight(eta, omega) / bound
        eta, omega = eta[accept][:need], omega[accept][:need]
        out.append(_superquadric_point(eta, omega, ax, eps1, eps2))
        need -= eta.shape[0]
    return torch.cat(out, dim=0)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "torus": _sample_torus,
    "superquadric": _sample_superquadric,
}


def _color_field(points: torch.Tensor, spec: ShapeSpec,
                 gen: torch.Generator) -> torch.Tensor:
    """Smooth asymmetric RGB field: 0.5 + 0.5 sin(f_k . p + phase_k) per channel."""
    freqs = spec.params.get("color_freqs")
    phases = spec.params.get("color_phases")
    if freqs is None:
        freqs = (torch.rand(3, 3, generator=gen) * 4.0 - 2.0) + 2.0
    else:
        freqs = torch.as_tensor(freqs, dtype=points.dtype)
    if phases is None:
        phases = torch.rand(3, generator=gen) * (2 * math.pi)
    else:
        phases = torch.as_tensor(phases, dtype=points.dtype)
    return 0.5 + 0.5 * torch.sin(points @ freqs.T + phases[None, :])


def make_shape(spec: ShapeSpec, seed: int) -> tuple[PointCloud, Gaussians]:
    """Surface point cloud plus isotropic teacher splats; deterministic per seed."""
    gen = generator(seed, "shape", spec.shape_id)
    pts = _SAMPLERS[spec.kind](spec, gen)

    # normalize into the unit cube (shapes are parameterized to fit already;
    # this guards custom parameter choices)
    peak = float(pts.abs().max())
    if peak > 1.0:
        pts = pts / peak
    colors = _color_field(pts, spec, gen)

    k = min(spec.n_teacher, pts.shape[0])
    idx = farthest_point_sampling(pts, k)
    centers = pts[idx]
    d2 = torch.cdist(centers, centers) ** 2
    d2.fill_diagonal_(float("inf"))
    spacing = torch.sqrt(d2.min(dim=1).values).clamp(1e-4, 0.5)
    scale = (0.6 * spacing)[:, None].expand(k, 3).contiguous()
    rot = torch.zeros(k, 4)
    rot[:, 0] = 1.0
    teacher = Gaussians(mu=centers, scale=scale, rot=rot,
                        opacity=torch.full((k,), 0.9), color=colors[idx].clone())
    return PointCloud(points=pts, colors=colors), teacher


def camera_rig(image_size: int, ring: int = 8, elevated: int = 2,
               radius: float = 2.5, near: float = 0.1, far: float = 6.0) -> list[Camera]:
    """Default supervision rig; keeps the unit cube inside every frustum."""
    cams = []
    focal = 0.5 * image_size
    for i in range(ring):
        angle = 2.0 * math.pi * i / ring
        eye = (radius * math.cos(angle), radius * math.sin(angle), 0.0)
        cams.append(Camera.look_at(eye, (0, 0, 0), focal, focal,
                                   image_size / 2, image_size / 2,
                                   image_size, image_size, near, far))
    for i in range(elevated):
        angle = math.pi * i
        eye = (radius * math.cos(angle) * math.cos(0.7),
               radius * math.sin(angle) * math.cos(0.7),
               radius * math.sin(0.7))
        cams.append(Camera.look_at(eye, (0, 0, 0), focal, focal,
                                   image_size / 2, image_size / 2,
                                   image_size, image_size, near, far))
    return cams


def render_ground_truth(teacher: Gaussians, cameras: list[Camera],
                        background=None) -> list[RenderOutput]:
    return [rasterize(teacher.detach(), cam, background) for cam in cameras]


def generate_record(spec: ShapeSpec, seed: int, image_size: int = 64,
                    cameras: list[Camera] | None = None,
                    background=None) -> DatasetRecord:
    shape_seed = derive_seed(seed, spec.shape_id)
    points, teacher = make_shape(spec, shape_seed)
    cams = cameras if cameras is not None else camera_rig(image_size)
    images = render_ground_truth(teacher, cams, background)
    return DatasetRecord(shape_id=spec.shape_id, label=spec.label, kind=spec.kind,
                         points=points, cameras=cams, images=images, seed=shape_seed)


def write_dataset(records: list[DatasetRecord], root: str | os.PathLike) -> None:
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    for rec in records:
        shape_dir = os.path.join(root, rec.shape_id)
        views_dir = os.path.join(shape_dir, "views")
        os.makedirs(views_dir, exist_ok=True)
        plyio.write_point_cloud(os.path.join(shape_dir, "points.ply"), rec.points)
        save_cameras(os.path.join(shape_dir, "cameras.json"), rec.cameras)
        for k, (cam, img) in enumerate(zip(rec.cameras, rec.images)):
            imgio.write_ppm(os.path.join(views_dir, f"rgb_{k}.ppm"), img.rgb)
            imgio.write_pgm(os.path.join(views_dir, f"alpha_{k}.pgm"), img.alpha)
            imgio.write_pgm(os.path.join(views_dir, f"depth_{k}.pgm"), img.depth / cam.far)
        meta = {"shape_id": rec.shape_id, "label": rec.label, "kind": rec.kind,
                "seed": rec.seed, "view_count": len(rec.cameras)}
        with open(os.path.join(shape_dir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1)


def read_dataset(root: str | os.PathLike) -> list[DatasetRecord]:
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise DataError(f"dataset root not found: {root}")
    records = []
    for shape_id in sorted(os.listdir(root)):
        shape_dir = os.path.join(root, shape_id)
        if not os.path.isdir(shape_dir):
            continue
        meta_path = os.path.join(shape_dir, "meta.json")
        if not os.path.exists(meta_path):
            raise DataError(f"missing file: {meta_path}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        points = plyio.read_point_cloud(os.path.join(shape_dir, "points.ply"))
        cameras = load_cameras(os.path.join(shape_dir, "cameras.json"))
        images = []
        for k, cam in enumerate(cameras):
            views_dir = os.path.join(shape_dir, "views")
            rgb = imgio.read_ppm(os.path.join(views_dir, f"rgb_{k}.ppm"))
            alpha = imgio.read_pgm(os.path.join(views_dir, f"alpha_{k}.pgm"))
            depth = imgio.read_pgm(os.path.join(views_dir, f"depth_{k}.pgm")) * cam.far
            images.append(RenderOutput(rgb=rgb, alpha=alpha, depth=depth))
        records.append(DatasetRecord(
            shape_id=meta["shape_id"], label=int(meta["label"]), kind=meta["kind"],
            points=points, cameras=cameras, images=images, seed=int(meta["seed"]),
        ))
    if not records:
        raise DataError(f"no shapes under dataset root {root}")
    return records


def training_tensors(record: DatasetRecord, views: int) -> ShapeRecordTensors:
    """Split a dataset record into training/held-out views for the VAE trainer."""
    if views < 1 or views > len(record.cameras):
        raise DataError(f"need 1..{len(record.cameras)} training views, got {views}")
    train_imgs = record.images[:views]
    rgb_stack = torch.stack([img.rgb for img in train_imgs])
    return ShapeRecordTensors(
        shape_id=record.shape_id,
        points=record.points.points,
        images=rgb_stack,
        cameras=record.cameras[:views],
        gt_renders=train_imgs,
        holdout_cameras=record.cameras[views:],
        holdout_renders=record.images[views:],
        label=record.label,
    )
