"""Self-verification suite behind the ``check`` subcommand.

Runs the gradient-oracle spot checks, renderer oracle equivalence, auction
EMD vs Hungarian comparison, and the diffusion preconditioning identities;
produces a machine-readable report. ``inject_error`` corrupts the first
gradient comparison on purpose (negative control for the harness).
"""
from __future__ import annotations

import json
import math

import torch

from .atlas import AtlasDecoder, Gaussians
from .diffusion import loss_weight, precondition
from .geometry import emd_approx, emd_exact
from .gradcheck import check_gradient, check_module_gradient
from .nn import CrossAttentionBlock, SelfAttentionBlock
from .render import Camera, rasterize, rasterize_reference, render_loss
from .util import generator, precision


def random_scene(gen: torch.Generator, count: int, image_size: int = 32) -> tuple:
    """Random splats in front of a ring camera, for oracle comparisons."""
    mu = (torch.rand(count, 3, generator=gen) * 2.0 - 1.0) * 0.8
    scale = torch.rand(count, 3, generator=gen) * 0.25 + 0.02
    rot = torch.randn(count, 4, generator=gen)
    rot = rot / torch.linalg.vector_norm(rot, dim=-1, keepdim=True)
    opacity = torch.rand(count, generator=gen) * 0.85 + 0.1
    color = torch.rand(count, 3, generator=gen)
    gaussians = Gaussians(mu=mu, scale=scale, rot=rot, opacity=opacity, color=color)
    cam = Camera.look_at((2.2, 0.4, 0.9), (0, 0, 0),
                         fx=0.55 * image_size, fy=0.55 * image_size,
                         cx=image_size / 2, cy=image_size / 2,
                         width=image_size, height=image_size, near=0.1, far=8.0)
    return gaussians, cam


def _single_gaussian_scene(gen: torch.Generator):
    """One mid-opacity splat on an 8x8 image, clear of clamp/skip thresholds."""
    mu = torch.tensor([0.05, -0.04, 0.02]) + torch.randn(3, generator=gen) * 0.02
    scale = torch.tensor([0.25, 0.3, 0.28]) + torch.rand(3, generator=gen) * 0.05
    rot = torch.randn(4, generator=gen)
    rot = rot + torch.sign(rot) * 0.3
    opacity = torch.tensor(0.6 + 0.1 * float(torch.rand((), generator=gen)))
    color = torch.rand(3, generator=gen) * 0.6 + 0.2
    cam = Camera.look_at((2.0, 0.0, 0.0), (0, 0, 0), fx=4.0, fy=4.0,
                         cx=4.0, cy=4.0, width=8, height=8, near=0.1, far=8.0)
    return mu, scale, rot, opacity, color, cam


def gradient_check_suite(seeds: int = 5, inject_error: bool = False) -> list[dict]:
    """Finite-difference spot checks over the differentiable surface (64-bit)."""
    results = []
    with precision("float64"):
        err = 0.0
        for s in range(seeds):
            gen = generator(1000 + s)
            dec = AtlasDecoder(8, gen)
            q = torch.rand(2, generator=gen, requires_grad=True)
            feats = torch.randn(4, 8, generator=gen, requires_grad=True)

            def weight_scalar():
                w = dec.corner_weights(q, feats)
                return (w * torch.arange(1.0, 5.0)).sum()

            err = max(err, check_gradient(weight_scalar, [q, feats]))
            err = max(err, check_module_gradient(dec, weight_scalar,
                                                 max_coords_per_param=6, gen=gen))
        if inject_error:
            err += 1.0
        results.append({"name": "grad_corner_weights", "max_error": err, "threshold": 1e-4})

        err = 0.0
        for s in range(seeds):
            gen = generator(2000 + s)
            dec = AtlasDecoder(8, gen)
            q = torch.rand(2, generator=gen, requires_grad=True)
            center = torch.randn(3, generator=gen, requires_grad=True)
            feats = torch.randn(4, 8, generator=gen, requires_grad=True)
            app = torch.randn(4, 8, generator=gen, requires_grad=True) * 0.5

            def decode_scalar():
                mu = dec.decode_position(q, center, feats)
                scale, quat, opac, col = dec.decode_attributes(q, app)
                return mu.sum() + scale.sum() + quat.sum() + opac + col.sum()

            err = max(err, check_gradient(decode_scalar, [q, center, feats, app]))
        results.append({"name": "grad_atlas_decode", "max_error": err, "threshold": 1e-4})

        err = 0.0
        for s in range(seeds):
            gen = generator(3000 + s)
            block = SelfAttentionBlock(8, 2, gen)
            cross = CrossAttentionBlock(8, 2, gen)
            x = torch.randn(3, 8, generator=gen, requires_grad=True)
            kv = torch.randn(5, 8, generator=gen, requires_grad=True)

            def attn_scalar():
                # small probe scale keeps finite-difference roundoff on the
                # structurally-zero key-bias gradient below the 1e-8 floor
                probe = torch.arange(1.0, 25.0).reshape(3, 8) / 10.0
                return (cross(block(x), kv) * probe).sum() / 1000.0

            err = max(err, check_gradient(attn_scalar, [x, kv]))
            err = max(err, check_module_gradient(block, attn_scalar,
                                                 max_coords_per_param=4, gen=gen))
        results.append({"name": "grad_attention", "max_error": err, "threshold": 1e-4})

        err = 0.0
        for s in range(seeds):
            gen = generator(4000 + s)
            mu, scale, rot, opacity, color, cam = _single_gaussian_scene(gen)
            target_gen = generator(5000 + s)
            target = Gaussians(
                mu=(mu + 0.05 * torch.randn(3, generator=target_gen))[None],
                scale=scale[None], rot=rot[None],
                opacity=opacity.reshape(1), color=color[None]).detach()
            target_img = rasterize(target, cam)
            params = [t.detach().clone().requires_grad_(True)
                      for t in (mu, scale, rot, opacity, color)]

            def render_scalar():
                g = Gaussians(mu=params[0][None], scale=params[1][None],
                              rot=params[2][None], opacity=params[3].reshape(1),
                              color=params[4][None])
                return render_loss(rasterize(g, cam), target_img, cam.far)

            err = max(err, check_gradient(render_scalar, params, eps=1e-6))
        results.append({"name": "grad_render_loss", "max_error": err, "threshold": 1e-3})
    return results


def renderer_oracle_check(scenes: int = 5) -> dict:
    worst = 0.0
    for s in range(scenes):
        gen = generator(6000 + s)
        count = 8 + int(torch.randint(0, 25, (1,), generator=gen))
        gaussians, cam = random_scene(gen, count, image_size=16)
        fast = rasterize(gaussians, cam)
        ref = rasterize_reference(gaussians, cam)
        worst = max(worst,
                    float((fast.rgb - ref.rgb).abs().max()),
                    float((fast.alpha - ref.alpha).abs().max()),
                    float((fast.depth - ref.depth).abs().max()))
    return {"name": "renderer_oracle", "max_error": worst, "threshold": 1e-5}


def emd_check(instances: int = 10) -> dict:
    worst = 0.0
    for s in range(instances):
        gen = generator(7000 + s)
        size = (8, 16, 32)[s % 3]
        p = torch.randn(size, 3, generator=gen)
        q = torch.randn(size, 3, generator=gen)
        exact = emd_exact(p, q)
        approx = float(emd_approx(p, q))
        worst = max(worst, abs(approx - exact) / max(exact, 1e-12))
    return {"name": "emd_vs_hungarian", "max_error": worst, "threshold": 0.05}


def precondition_check() -> dict:
    worst = 0.0
    with precision("float64"):
        sigma_data = 0.5
        sigmas = torch.logspace(-3, 3, 61, dtype=torch.float64)
        c_skip, c_out, c_in, _ = precondition(sigmas, sigma_data)
        lhs = c_out ** 2 + c_skip ** 2 * (sigmas ** 2 + sigma_data ** 2)
        worst = float(((lhs - sigma_data ** 2).abs() / sigma_data ** 2).max())
        unit = loss_weight(sigmas, sigma_data) * c_out ** 2
        worst = max(worst, float((unit - 1.0).abs().max()))
    return {"name": "edm_identities", "max_error": worst, "threshold": 1e-12}


def run_checks(seed: int = 0, inject_error: bool = False) -> dict:
    torch.manual_seed(seed)
    checks = gradient_check_suite(inject_error=inject_error)
    checks.append(renderer_oracle_check())
    checks.append(emd_check())
    checks.append(precondition_check())
    for c in checks:
        c["pass"] = bool(math.isfinite(c["max_error"]) and c["max_error"] <= c["threshold"])
    return {"checks": checks, "pass": all(c["pass"] for c in checks)}


def format_report(report: dict) -> str:
    lines = []
    for c in report["checks"]:
        status = "PASS" if c["pass"] else "FAIL"
        lines.append(f"{status}  {c['name']:<22} max_error={c['max_error']:.3e} "
                     f"threshold={c['threshold']:.0e}")
    lines.append("overall: " + ("PASS" if report["pass"] else "FAIL"))
    return "\n".join(lines)


def write_report(report: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
