"""Stage-1 model: set-latent encoder, upsampling decoder, losses, training loop.

The encoder cross-attends a small latent set (initialized from farthest-point
sampled input points) over point and image features, refines it with
self-attention, and emits a diagonal Gaussian over an n x d0 latent. The
decoder lifts the latent back to M patch tokens (Perceiver-style query +
pixel shuffle), reads patch centers off one head, and decodes 4-corner
geometry/appearance features per patch with local per-patch attention plus a
broadcast global feature.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn as torch_nn

from .atlas import AtlasDecoder, Gaussians, PatchSet, PositionalEncoder, \
    decode_atlas, sample_uv_grid
from .checkpoint import load_state, save_state
from .geometry import chamfer, emd_approx, farthest_point_sampling, kl_diag_gaussian
from .nn import CrossAttentionStack, SelfAttentionBlock, SelfAttentionStack, \
    make_linear
from .render import RenderOutput, rasterize, render_loss
from .util import DataError, NonFiniteError, assert_finite, generator, psnr


@dataclass
class VAEConfig:
    """Desk-scale defaults; full-scale values (n=512, d=512, M=2048) stay legal."""

    n: int = 16                  # latent tokens
    d: int = 64                  # model width
    d0: int = 8                  # latent channel width
    m: int = 64                  # patch count
    beta: int = 4                # corner features per patch (fixed by the representation)
    alpha: int = 4               # render-time UV grid resolution
    views: int = 4               # supervision views
    image_size: int = 64
    point_count: int = 2048
    lambda_kl: float = 1e-4
    s_counts: tuple = (1, 4)     # multi-resolution center-supervision sample counts
    use_images: bool = True
    image_patch: int = 8
    heads: int = 4
    freq_count: int = 8
    enc_point_blocks: int = 2
    enc_image_blocks: int = 1
    enc_self_blocks: int = 2
    image_embed_blocks: int = 1
    up_cross_blocks: int = 1
    up_self_blocks: int = 1
    up_post_blocks: int = 1
    center_blocks: int = 2
    feature_blocks: int = 2
    weight_mode: str = "learned"          # "learned" | "bilinear"
    disentangle: bool = True              # separate geometry/appearance branches
    use_global_broadcast: bool = True
    share_weight_encoders: bool = False
    logvar_min: float = -20.0
    logvar_max: float = 8.0

    def __post_init__(self) -> None:
        if self.beta != 4:
            raise DataError("corner feature count is fixed at 4")
        if self.m % self.n != 0:
            raise DataError(f"patch count {self.m} must be divisible by n={self.n}")
        if self.alpha < 1:
            raise DataError("alpha must be >= 1")
        if self.image_size % self.image_patch != 0:
            raise DataError("image size must be divisible by the embed patch size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "VAEConfig":
        obj = dict(obj)
        if "s_counts" in obj:
            obj["s_counts"] = tuple(obj["s_counts"])
        return VAEConfig(**obj)


@dataclass
class LatentSet:
    """VAE bottleneck: sampled z0 plus the diagonal Gaussian that produced it."""

    z0: torch.Tensor
    mean: torch.Tensor
    logvar: torch.Tensor


@dataclass
class ShapeInput:
    points: torch.Tensor                   # (P, 3)
    images: torch.Tensor | None = None     # (V, H, W, 3)

    def __post_init__(self) -> None:
        if self.points.dim() != 2 or self.points.shape[0] == 0:
            raise DataError("shape input needs a non-empty point cloud")


@dataclass
class DecoderState:
    """Intermediates of one decode pass, for inspection and tests."""

    z1: torch.Tensor
    z2: torch.Tensor
    z_l: torch.Tensor
    z_f: torch.Tensor | None = None
    z_h: torch.Tensor | None = None


def pixel_shuffle_rows(x: torch.Tensor, d: int) -> torch.Tensor:
    """(n, k*d) -> (n*k, d): output row i*k+j takes channels [j*d, (j+1)*d) of row i."""
    n, kd = x.shape
    if kd % d != 0:
        raise DataError(f"cannot shuffle width {kd} into channels of {d}")
    return x.reshape(n, kd // d, d).reshape(n * (kd // d), d)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor,
                   gen: torch.Generator) -> torch.Tensor:
    """z0 = mean + exp(logvar / 2) * eps with seeded standard-normal eps."""
    if mean.shape != logvar.shape:
        raise DataError("mean/logvar shape mismatch")
    eps = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


class ImageBranch(torch_nn.Module):
    """From-scratch patch embedder + shallow transformer over all views."""

    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        p = cfg.image_patch
        self.patch = p
        self.tokens_per_side = cfg.image_size // p
        self.embed = make_linear(3 * p * p, cfg.d, gen)
        pos = torch.empty(self.tokens_per_side ** 2, cfg.d)
        pos.normal_(0.0, 0.02, generator=gen)
        self.pos = torch_nn.Parameter(pos)
        self.blocks = SelfAttentionStack(cfg.d, cfg.heads, cfg.image_embed_blocks, gen)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        v, h, w, _ = images.shape
        p = self.patch
        grid = images.reshape(v, h // p, p, w // p, p, 3)
        tokens = grid.permute(0, 1, 3, 2, 4, 5).reshape(v, (h // p) * (w // p), p * p * 3)
        x = self.embed(tokens) + self.pos[None]
        x = self.blocks(x)
        return x.reshape(v * x.shape[1], -1)


class VAEEncoder(torch_nn.Module):
    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.point_encoder = PositionalEncoder(3, cfg.d, gen, cfg.freq_count)
        self.point_cross = CrossAttentionStack(cfg.d, cfg.heads, cfg.enc_point_blocks, gen)
        if cfg.use_images:
            self.image_branch = ImageBranch(cfg, gen)
            self.image_cross = CrossAttentionStack(cfg.d, cfg.heads, cfg.enc_image_blocks, gen)
        self.refine = SelfAttentionStack(cfg.d, cfg.heads, cfg.enc_self_blocks, gen)
        self.norm = torch_nn.LayerNorm(cfg.d)
        self.head = make_linear(cfg.d, 2 * cfg.d0, gen)
        # start with a tight posterior (std ~ exp(-2) = 0.14): keeps sampled and
        # mean latents close, so the decoder never co-adapts to wide noise
        with torch.no_grad():
            self.head.bias[cfg.d0:] = -4.0

    def forward(self, points: torch.Tensor, images: torch.Tensor | None = None,
                fps_idx: torch.Tensor | None = None):
        cfg = self.cfg
        if points.shape[0] < cfg.n:
            raise DataError(f"need at least n={cfg.n} points, got {points.shape[0]}")
        if fps_idx is None:
            fps_idx = farthest_point_sampling(points, cfg.n)
        queries = self.point_encoder(points[fps_idx])
        z = self.point_cross(queries, self.point_encoder(points))
        if cfg.use_images and images is not None:
            z = self.image_cross(z, self.image_branch(images))
        z = self.refine(z)
        out = self.head(self.norm(z))
        mean, logvar = out[:, :cfg.d0], out[:, cfg.d0:]
        logvar = logvar.clamp(cfg.logvar_min, cfg.logvar_max)
        assert_finite(mean, "encoder mean")
        return mean, logvar


class LatentUpsampler(torch_nn.Module):
    """n x d0 latent -> M x d patch tokens via learnable query + pixel shuffle."""

    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.in_proj = make_linear(cfg.d0, cfg.d, gen)
        query = torch.empty(cfg.n, cfg.d)
        query.normal_(0.0, 0.02, generator=gen)
        self.query = torch_nn.Parameter(query)
        self.cross = CrossAttentionStack(cfg.d, cfg.heads, cfg.up_cross_blocks, gen)
        self.self1 = SelfAttentionStack(cfg.d, cfg.heads, cfg.up_self_blocks, gen)
        self.widen = make_linear(cfg.d, (cfg.m // cfg.n) * cfg.d, gen)
        self.post = SelfAttentionStack(cfg.d, cfg.heads, cfg.up_post_blocks, gen)

    def forward(self, z0: torch.Tensor) -> DecoderState:
        cfg = self.cfg
        if z0.shape != (cfg.n, cfg.d0):
            raise DataError(f"latent must be ({cfg.n}, {cfg.d0}), got {tuple(z0.shape)}")
        z1 = self.self1(self.cross(self.query, self.in_proj(z0)))
        z2 = pixel_shuffle_rows(self.widen(z1), cfg.d)
        z_l = self.post(z2)
        return DecoderState(z1=z1, z2=z2, z_l=z_l)


class CenterHead(torch_nn.Module):
    """Patch centers via self-attention, squashed into the normalized scene cube."""

    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.stack = SelfAttentionStack(cfg.d, cfg.heads, cfg.center_blocks, gen)
        self.norm = torch_nn.LayerNorm(cfg.d)
        self.head = make_linear(cfg.d, 3, gen)

    def forward(self, z_l: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.head(self.norm(self.stack(z_l))))


class PatchFeatureBranch(torch_nn.Module):
    """M x d -> M x beta x d corner features with per-patch local attention.

    Attention runs independently inside each patch's beta tokens (batch axis
    M), so each layer scores exactly M * beta^2 token pairs. The patch's
    global feature row is broadcast-added before every block when enabled;
    the broadcast is layer-normalized and gated so it conditions the local
    tokens without drowning their corner-to-corner differences.
    """

    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.beta = cfg.beta
        self.use_global = cfg.use_global_broadcast
        self.widen = make_linear(cfg.d, cfg.beta * cfg.d, gen)
        self.blocks = torch_nn.ModuleList(
            SelfAttentionBlock(cfg.d, cfg.heads, gen) for _ in range(cfg.feature_blocks)
        )
        self.global_norm = torch_nn.LayerNorm(cfg.d)
        self.global_gate = torch_nn.Parameter(
            torch.full((cfg.feature_blocks,), 0.1))

    def forward(self, z_l: torch.Tensor) -> torch.Tensor:
        m, d = z_l.shape
        x = self.widen(z_l).reshape(m, self.beta, d)
        for i, block in enumerate(self.blocks):
            if self.use_global:
                x = x + self.global_gate[i] * self.global_norm(z_l)[:, None, :]
            x = block(x)
        return x


class PatchFeatureDecoder(torch_nn.Module):
    """Two-branch geometry/appearance decoding (or one shared branch)."""

    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.disentangle = cfg.disentangle
        self.geom_branch = PatchFeatureBranch(cfg, gen)
        self.app_branch = PatchFeatureBranch(cfg, gen) if cfg.disentangle else self.geom_branch

    def forward(self, z_l: torch.Tensor):
        z_f = self.geom_branch(z_l)
        z_h = z_f if not self.disentangle else self.app_branch(z_l)
        return z_f, z_h


class AtlasVAE(torch_nn.Module):
    def __init__(self, cfg: VAEConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.encoder = VAEEncoder(cfg, gen)
        self.upsampler = LatentUpsampler(cfg, gen)
        self.center_head = CenterHead(cfg, gen)
        self.feature_decoder = PatchFeatureDecoder(cfg, gen)
        self.atlas = AtlasDecoder(cfg.d, gen, weight_mode=cfg.weight_mode,
                                  share_weight_encoders=cfg.share_weight_encoders,
                                  freq_count=cfg.freq_count)

    def encode(self, points, images=None, fps_idx=None):
        return self.encoder(points, images, fps_idx)

    def encode_latent(self, shape: ShapeInput, gen: torch.Generator) -> LatentSet:
        """Posterior for a shape plus one reparameterized sample."""
        mean, logvar = self.encoder(shape.points, shape.images)
        return LatentSet(z0=reparameterize(mean, logvar, gen), mean=mean,
                         logvar=logvar)

    def decode_latent(self, z0: torch.Tensor) -> tuple[PatchSet, DecoderState]:
        state = self.upsampler(z0)
        centers = self.center_head(state.z_l)
        z_f, z_h = self.feature_decoder(state.z_l)
        state.z_f, state.z_h = z_f, z_h
        return PatchSet(centers=centers, geom=z_f, app=z_h), state

    def decode_gaussians(self, z0: torch.Tensor, uv: torch.Tensor) -> Gaussians:
        patches, _ = self.decode_latent(z0)
        return decode_atlas(patches, self.atlas, uv)


def build_vae(cfg: VAEConfig, seed: int) -> AtlasVAE:
    return AtlasVAE(cfg, generator(seed, "vae-init"))


@dataclass
class ShapeRecordTensors:
    """Preprocessed per-shape training tensors (cached by the trainer)."""

    shape_id: str
    points: torch.Tensor
    images: torch.Tensor | None
    cameras: list
    gt_renders: list            # RenderOutput per training camera
    holdout_cameras: list = field(default_factory=list)
    holdout_renders: list = field(default_factory=list)
    fps_idx: torch.Tensor | None = None
    gt_subsets: dict = field(default_factory=dict)
    label: int = 0

    def gt_subset(self, k: int) -> torch.Tensor:
        if k not in self.gt_subsets:
            n = self.points.shape[0]
            if k >= n:
                self.gt_subsets[k] = self.points
            else:
                idx = farthest_point_sampling(self.points, k)
                self.gt_subsets[k] = self.points[idx]
        return self.gt_subsets[k]


def _matched_sizes(pred: torch.Tensor, target_full: torch.Tensor,
                   rec: ShapeRecordTensors) -> tuple[torch.Tensor, torch.Tensor]:
    """Equal-size pair for EMD: FPS-subsample whichever side is larger."""
    np_, nt = pred.shape[0], target_full.shape[0]
    if np_ == nt:
        return pred, target_full
    if np_ < nt:
        return pred, rec.gt_subset(np_)
    idx = farthest_point_sampling(pred.detach(), nt)
    return pred[idx], target_full


def vae_loss(model: AtlasVAE, rec: ShapeRecordTensors, stage: int,
             uv_gen: torch.Generator, noise_gen: torch.Generator,
             perceptual_fn=None, background=None):
    """Total training loss and its component breakdown for one shape.

    Stage 1 trains geometry only (render weight 0); stage 2 adds image
    supervision via grid-sampled splats rendered from the training cameras.
    """
    if stage not in (1, 2):
        raise DataError(f"stage must be 1 or 2, got {stage}")
    cfg = model.cfg
    if stage == 2 and (rec.images is None or not rec.gt_renders):
        raise DataError(f"shape {rec.shape_id}: stage 2 needs supervision views")

    mean, logvar = model.encode(rec.points, rec.images, rec.fps_idx)
    z0 = reparameterize(mean, logvar, noise_gen)
    patches, _ = model.decode_latent(z0)

    gt = rec.points
    centers = patches.centers
    c_pred, c_tgt = _matched_sizes(centers, gt, rec)
    loss_center = chamfer(centers, gt) + emd_approx(c_pred, c_tgt)

    loss_mu = torch.zeros((), dtype=centers.dtype)
    for s_count in cfg.s_counts:
        uv = torch.rand(cfg.m, s_count, 2, generator=uv_gen, dtype=centers.dtype)
        mu = model.atlas.decode_position(
            uv, patches.centers[:, None, :], patches.geom[:, None, :, :]
        ).reshape(cfg.m * s_count, 3)
        m_pred, m_tgt = _matched_sizes(mu, gt, rec)
        loss_mu = loss_mu + chamfer(mu, gt) + emd_approx(m_pred, m_tgt)

    lambda_r = 0.0 if stage == 1 else 1.0
    loss_render = torch.zeros((), dtype=centers.dtype)
    loss_lpips = torch.zeros((), dtype=centers.dtype)
    if stage == 2:
        splats = decode_atlas(patches, model.atlas, sample_uv_grid(cfg.alpha).to(centers.dtype))
        preds = []
        for cam, target in zip(rec.cameras, rec.gt_renders):
            pred = rasterize(splats, cam, background)
            preds.append(pred)
            loss_render = loss_render + render_loss(pred, target, cam.far)
        loss_render = loss_render / max(len(rec.gt_renders), 1)
        if perceptual_fn is not None:
            pred_rgb = torch.stack([p.rgb for p in preds])
            gt_rgb = torch.stack([t.rgb for t in rec.gt_renders])
            loss_lpips = perceptual_fn(pred_rgb, gt_rgb)
            if not torch.is_tensor(loss_lpips):
                loss_lpips = torch.as_tensor(loss_lpips, dtype=centers.dtype)

    loss_kl = kl_diag_gaussian(mean, logvar)
    total = loss_center + loss_mu + lambda_r * (loss_render + loss_lpips) \
        + cfg.lambda_kl * loss_kl
    components = {
        "center": float(loss_center.detach()),
        "mu": float(loss_mu.detach()),
        "render": float(loss_render.detach()),
        "lpips": float(loss_lpips.detach()),
        "kl": float(loss_kl.detach()),
        "lambda_render": lambda_r,
        "lambda_kl": cfg.lambda_kl,
        "total": float(total.detach()),
    }
    return total, components


METRICS_HEADER = [
    "epoch", "step", "stage", "lr", "loss_total", "loss_center", "loss_mu",
    "loss_render", "loss_lpips", "loss_kl", "psnr_train", "psnr_holdout",
]


def evaluate_psnr(model: AtlasVAE, rec: ShapeRecordTensors,
                  background=None) -> tuple[float, float]:
    """Mean PSNR over training and held-out views using grid-sampled splats."""
    cfg = model.cfg
    with torch.no_grad():
        mean, _ = model.encode(rec.points, rec.images, rec.fps_idx)
        splats = model.decode_gaussians(mean, sample_uv_grid(cfg.alpha))
        scores = []
        for cams, targets in ((rec.cameras, rec.gt_renders),
                              (rec.holdout_cameras, rec.holdout_renders)):
            vals = [psnr(rasterize(splats, cam, background).rgb, target.rgb)
                    for cam, target in zip(cams, targets)]
            scores.append(sum(vals) / len(vals) if vals else float("nan"))
    return scores[0], scores[1]


def _optimizer_tensors(opt: torch.optim.AdamW, names: list[str]) -> dict:
    out = {}
    for name, p in zip(names, opt.param_groups[0]["params"]):
        state = opt.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                out[f"opt.{name}.{key}"] = state[key]
        if "step" in state:
            step = state["step"]
            out[f"opt.{name}.step"] = (step if torch.is_tensor(step)
                                       else torch.tensor(float(step)))
    return out


def _restore_optimizer(opt: torch.optim.AdamW, names: list[str], tensors: dict) -> None:
    for name, p in zip(names, opt.param_groups[0]["params"]):
        state = {}
        for key in ("exp_avg", "exp_avg_sq"):
            t = tensors.get(f"opt.{name}.{key}")
            if t is not None:
                state[key] = t.to(p.dtype)
        t = tensors.get(f"opt.{name}.step")
        if t is not None:
            state["step"] = t.to(torch.float32)
        if state:
            opt.state[p] = state


def save_vae_checkpoint(path, model: AtlasVAE, meta: dict,
                        opt: torch.optim.AdamW | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        names = [k for k, _ in model.named_parameters()]
        tensors.update(_optimizer_tensors(opt, names))
    meta = dict(meta)
    meta["config"] = model.cfg.to_dict()
    save_state(path, tensors, meta)


def load_vae_checkpoint(path) -> tuple[AtlasVAE, dict, dict]:
    tensors, meta = load_state(path)
    if "config" not in meta:
        raise DataError(f"{os.fspath(path)}: missing VAE config metadata")
    cfg = VAEConfig.from_dict(meta["config"])
    model = build_vae(cfg, seed=0)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict({k: v.to(torch.get_default_dtype()) for k, v in state.items()})
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, meta, opt_tensors


def train_vae(records: list[ShapeRecordTensors], cfg: VAEConfig, out_dir: str,
              seed: int, steps_stage1: int, steps_stage2: int,
              lr: float = 3e-3, weight_decay: float = 1e-4,
              checkpoint_every: int = 500, eval_every_epochs: int = 10,
              resume: str | None = None, perceptual_fn=None,
              background=None, log_fn=print) -> dict:
    """Two-stage AdamW + one-cycle training loop with CSV metrics.

    One step consumes one shape; an epoch is one pass over the dataset.
    Checkpoints are written atomically; a non-finite loss aborts after
    dumping diagnostic state.
    """
    if not records:
        raise DataError("empty training dataset")
    os.makedirs(out_dir, exist_ok=True)
    total_steps = steps_stage1 + steps_stage2
    if total_steps <= 0:
        raise DataError("no training steps requested")

    start_step = 0
    if resume is not None:
        model, meta, opt_tensors = load_vae_checkpoint(resume)
        start_step = int(meta.get("step", 0))
        if VAEConfig.from_dict(meta["config"]) != cfg:
            raise DataError("resume checkpoint config does not match requested config")
    else:
        model = build_vae(cfg, seed)
        opt_tensors = {}

    names = [k for k, _ in model.named_parameters()]
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=total_steps)
    if opt_tensors:
        _restore_optimizer(opt, names, opt_tensors)
        with warnings.catch_warnings():
            # fast-forward the schedule to the resume step
            warnings.simplefilter("ignore")
            for _ in range(start_step):
                sched.step()

    for rec in records:
        if rec.fps_idx is None:
            rec.fps_idx = farthest_point_sampling(rec.points, cfg.n)

    csv_path = os.path.join(out_dir, "metrics.csv")
    csv_mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    csv_file = open(csv_path, csv_mode, newline="")
    writer = csv.writer(csv_file)
    if csv_mode == "w":
        writer.writerow(METRICS_HEADER)

    n_rec = len(records)
    epoch_acc: dict[str, float] = {}
    epoch_count = 0
    last_psnr = (float("nan"), float("nan"))
    ema = meta.get("loss_ema") if resume is not None else None
    ckpt_path = os.path.join(out_dir, "vae.atlg")
    t0 = time.time()

    for step in range(start_step, total_steps):
        stage = 1 if step < steps_stage1 else 2
        epoch = step // n_rec
        rec = records[step % n_rec]
        uv_gen = generator(seed, "uv", epoch, rec.shape_id)
        noise_gen = generator(seed, "reparam", step, rec.shape_id)
        loss, comps = vae_loss(model, rec, stage, uv_gen, noise_gen,
                               perceptual_fn=perceptual_fn, background=background)
        if not math.isfinite(comps["total"]):
            dump = os.path.join(out_dir, f"diagnostic_step{step}.atlg")
            save_vae_checkpoint(dump, model, {"step": step, "stage": stage,
                                              "components": comps})
            raise NonFiniteError(f"non-finite loss at step {step}; state dumped to {dump}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
        opt.step()
        sched.step()
        ema = comps["total"] if ema is None else 0.95 * ema + 0.05 * comps["total"]

        for key in ("total", "center", "mu", "render", "lpips", "kl"):
            epoch_acc[key] = epoch_acc.get(key, 0.0) + comps[key]
        epoch_count += 1

        if (step + 1) % n_rec == 0 or step + 1 == total_steps:
            is_last = step + 1 == total_steps
            if epoch % eval_every_epochs == 0 or is_last:
                vals = [evaluate_psnr(model, r, background) for r in records]
                last_psnr = (sum(v[0] for v in vals) / len(vals),
                             sum(v[1] for v in vals) / len(vals))
            writer.writerow([
                epoch, step + 1, stage, f"{sched.get_last_lr()[0]:.6g}",
                *(f"{epoch_acc[k] / max(epoch_count, 1):.6g}"
                  for k in ("total", "center", "mu", "render", "lpips", "kl")),
                f"{last_psnr[0]:.4f}", f"{last_psnr[1]:.4f}",
            ])
            csv_file.flush()
            if log_fn is not None and (epoch % eval_every_epochs == 0 or is_last):
                log_fn(f"epoch {epoch} step {step + 1}/{total_steps} stage {stage} "
                       f"loss {epoch_acc['total'] / max(epoch_count, 1):.4f} "
                       f"psnr {last_psnr[0]:.2f}/{last_psnr[1]:.2f} "
                       f"({time.time() - t0:.0f}s)")
            epoch_acc, epoch_count = {}, 0

        if (step + 1) % checkpoint_every == 0 or step + 1 == total_steps:
            save_vae_checkpoint(ckpt_path, model,
                                {"step": step + 1, "stage": stage, "seed": seed,
                                 "loss_ema": ema}, opt=opt)

    csv_file.close()
    return {"checkpoint": ckpt_path, "metrics_csv": csv_path, "loss_ema": ema,
            "psnr_train": last_psnr[0], "psnr_holdout": last_psnr[1],
            "model": model}


def export_latents(model: AtlasVAE, records: list[ShapeRecordTensors]) -> dict:
    """Deterministic per-shape latents (posterior means) for diffusion training."""
    out = {}
    with torch.no_grad():
        for rec in records:
            mean, _ = model.encode(rec.points, rec.images, rec.fps_idx)
            out[rec.shape_id] = mean.clone()
    return out
