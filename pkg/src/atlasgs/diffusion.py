"""Latent diffusion over the VAE's token set, in the EDM parameterization.

The denoiser wraps a transformer F (self-attention + cross-attention over a
condition token per block) in sigma-dependent skip/input/output scalings, is
trained with log-normal noise draws and weight (sigma^2 + sd^2) / (sigma sd)^2,
and samples deterministically along a Karras sigma schedule with Heun's
second-order corrector (plain Euler on the final interval to sigma = 0).
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import warnings
from dataclasses import dataclass

import torch
from torch import nn as torch_nn

from .atlas import PositionalEncoder
from .checkpoint import load_state, save_state
from .nn import CrossAttentionBlock, SelfAttentionBlock, make_linear, zero_linear_
from .util import DataError, NonFiniteError, generator


@dataclass
class EDMConfig:
    n: int = 16                  # latent tokens
    d0: int = 8                  # latent channels
    width: int = 64              # denoiser working width
    blocks: int = 4
    heads: int = 4
    sigma_data: float = 0.5
    estimate_sigma_data: bool = True   # overwrite sigma_data with the latent std at training
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 40
    p_mean: float = -1.2         # log-normal training noise distribution
    p_std: float = 1.2
    condition: str = "none"      # "none" (learnable token) | "class"
    num_classes: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.sigma_min < self.sigma_max):
            raise DataError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise DataError("sigma_data must be positive")
        if self.condition not in ("none", "class"):
            raise DataError(f"unknown condition mode {self.condition!r}")
        if self.condition == "class" and self.num_classes < 1:
            raise DataError("class conditioning needs num_classes >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "EDMConfig":
        return EDMConfig(**obj)


def precondition(sigma: torch.Tensor | float, sigma_data: float):
    """EDM skip/output/input/noise coefficients for noise level sigma.

    c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
    c_in = 1/sqrt(s^2+sd^2), c_noise = ln(s)/4.
    """
    sigma = torch.as_tensor(sigma, dtype=torch.get_default_dtype())
    if bool((sigma <= 0).any()):
        raise DataError("sigma must be positive")
    var = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / var
    c_out = sigma * sigma_data / torch.sqrt(var)
    c_in = 1.0 / torch.sqrt(var)
    c_noise = 0.25 * torch.log(sigma)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma: torch.Tensor | float, sigma_data: float) -> torch.Tensor:
    """EDM weight (s^2 + sd^2) / (s * sd)^2; satisfies weight * c_out^2 = 1."""
    sigma = torch.as_tensor(sigma, dtype=torch.get_default_dtype())
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


class Denoiser(torch_nn.Module):
    """Preconditioned token-set denoiser; permutation-equivariant over tokens."""

    def __init__(self, cfg: EDMConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.in_map = make_linear(cfg.d0, w, gen)
        self.noise_embed = PositionalEncoder(1, w, gen, freq_count=8)
        if cfg.condition == "class":
            table = torch.empty(cfg.num_classes, w)
            table.normal_(0.0, 0.02, generator=gen)
            self.class_table = torch_nn.Parameter(table)
        else:
            token = torch.empty(1, w)
            token.normal_(0.0, 0.02, generator=gen)
            self.cond_token = torch_nn.Parameter(token)
        self.self_blocks = torch_nn.ModuleList(
            SelfAttentionBlock(w, cfg.heads, gen) for _ in range(cfg.blocks))
        self.cross_blocks = torch_nn.ModuleList(
            CrossAttentionBlock(w, cfg.heads, gen) for _ in range(cfg.blocks))
        self.out_norm = torch_nn.LayerNorm(w)
        # zero-init output so the untrained denoiser is the pure skip path
        self.out_map = zero_linear_(make_linear(w, cfg.d0, gen))

    def _condition(self, batch: int, labels) -> torch.Tensor:
        if self.cfg.condition == "class":
            if labels is None:
                raise DataError("class-conditional model needs labels")
            labels = torch.as_tensor(labels, dtype=torch.long).reshape(batch)
            return self.class_table[labels][:, None, :]
        return self.cond_token[None].expand(batch, -1, -1)

    def network(self, x: torch.Tensor, c_noise: torch.Tensor, labels) -> torch.Tensor:
        """F: input map, per-token noise embedding add, block stack, output map."""
        batch = x.shape[0]
        h = self.in_map(x) + self.noise_embed(c_noise[:, None])[:, None, :]
        cond = self._condition(batch, labels)
        for sa, ca in zip(self.self_blocks, self.cross_blocks):
            h = ca(sa(h), cond)
        return self.out_map(self.out_norm(h))

    def denoise(self, z_noisy: torch.Tensor, sigma, labels=None) -> torch.Tensor:
        """D(z; sigma) = c_skip z + c_out F(c_in z; c_noise). Accepts (n, d0) or (B, n, d0)."""
        squeeze = z_noisy.dim() == 2
        if squeeze:
            z_noisy = z_noisy[None]
        batch = z_noisy.shape[0]
        if z_noisy.shape[1:] != (self.cfg.n, self.cfg.d0):
            raise DataError(
                f"latent must be (B, {self.cfg.n}, {self.cfg.d0}), got {tuple(z_noisy.shape)}")
        sigma = torch.as_tensor(sigma, dtype=z_noisy.dtype).reshape(-1)
        if sigma.numel() == 1:
            sigma = sigma.expand(batch)
        c_skip, c_out, c_in, c_noise = precondition(sigma, self.cfg.sigma_data)
        f_out = self.network(c_in[:, None, None] * z_noisy, c_noise, labels)
        out = c_skip[:, None, None] * z_noisy + c_out[:, None, None] * f_out
        return out[0] if squeeze else out

    forward = denoise


def build_denoiser(cfg: EDMConfig, seed: int) -> Denoiser:
    return Denoiser(cfg, generator(seed, "ldm-init"))


def ldm_loss(model, z0: torch.Tensor, gen: torch.Generator,
             labels=None) -> torch.Tensor:
    """Weighted denoising MSE on noised latents, noise level from p_train.

    ``model`` only needs ``denoise`` and ``cfg``; z0 is (B, n, d0).
    """
    cfg = model.cfg
    batch = z0.shape[0]
    sigma = torch.exp(cfg.p_mean + cfg.p_std
                      * torch.randn(batch, generator=gen, dtype=z0.dtype))
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype) * sigma[:, None, None]
    denoised = model.denoise(z0 + noise, sigma, labels)
    weight = loss_weight(sigma, cfg.sigma_data)
    return (weight[:, None, None] * (denoised - z0) ** 2).mean()


def karras_sigmas(steps: int, cfg: EDMConfig) -> torch.Tensor:
    """Strictly decreasing noise schedule from sigma_max to sigma_min, then 0."""
    if steps < 1:
        raise DataError("steps must be >= 1")
    if steps == 1:
        ramp = torch.tensor([cfg.sigma_max], dtype=torch.get_default_dtype())
    else:
        i = torch.arange(steps, dtype=torch.get_default_dtype()) / (steps - 1)
        inv_rho = 1.0 / cfg.rho
        ramp = (cfg.sigma_max ** inv_rho
                + i * (cfg.sigma_min ** inv_rho - cfg.sigma_max ** inv_rho)) ** cfg.rho
    return torch.cat([ramp, torch.zeros(1, dtype=ramp.dtype)])


def sample(model, count: int, gen: torch.Generator, steps: int | None = None,
           labels=None) -> torch.Tensor:
    """Deterministic Heun integration of dz/dsigma = (z - D(z; sigma)) / sigma.

    Starts from z ~ N(0, sigma_max^2 I); the final interval (to sigma = 0)
    is a single Euler step. Bitwise-reproducible for a fixed seed.
    """
    cfg = model.cfg
    sigmas = karras_sigmas(steps or cfg.steps, cfg)
    z = torch.randn(count, cfg.n, cfg.d0, generator=gen) * sigmas[0]
    with torch.no_grad():
        for i in range(len(sigmas) - 1):
            sig, sig_next = sigmas[i], sigmas[i + 1]
            slope = (z - model.denoise(z, sig, labels)) / sig
            z_next = z + (sig_next - sig) * slope
            if float(sig_next) > 0.0:
                slope_next = (z_next - model.denoise(z_next, sig_next, labels)) / sig_next
                z_next = z + (sig_next - sig) * 0.5 * (slope + slope_next)
            z = z_next
    return z


def save_ldm_checkpoint(path, model: Denoiser, meta: dict,
                        opt: torch.optim.AdamW | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        for i, p in enumerate(opt.param_groups[0]["params"]):
            state = opt.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    tensors[f"opt.{i}.{key}"] = state[key]
            if "step" in state:
                step = state["step"]
                tensors[f"opt.{i}.step"] = (step if torch.is_tensor(step)
                                            else torch.tensor(float(step)))
    meta = dict(meta)
    meta["config"] = model.cfg.to_dict()
    save_state(path, tensors, meta)


def load_ldm_checkpoint(path) -> tuple[Denoiser, dict, dict]:
    tensors, meta = load_state(path)
    if "config" not in meta:
        raise DataError(f"{os.fspath(path)}: missing diffusion config metadata")
    cfg = EDMConfig.from_dict(meta["config"])
    model = build_denoiser(cfg, seed=0)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict({k: v.to(torch.get_default_dtype()) for k, v in state.items()})
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, meta, opt_tensors


def train_ldm(latents: dict[str, torch.Tensor], cfg: EDMConfig, out_dir: str,
              seed: int, steps: int, lr: float = 1e-3, weight_decay: float = 1e-4,
              labels: dict[str, int] | None = None,
              checkpoint_every: int = 200, resume: str | None = None,
              min_batch: int = 32, log_fn=print) -> dict:
    """AdamW + one-cycle training on a fixed latent set; one step = one pass.

    Tiny latent sets are replicated with independent noise draws up to
    ``min_batch`` samples per step to tame gradient variance.
    """
    if not latents:
        raise DataError("empty latent dataset")
    os.makedirs(out_dir, exist_ok=True)
    ids = sorted(latents)
    stack = torch.stack([latents[k] for k in ids])
    repeats = max(1, min_batch // stack.shape[0])
    label_tensor = None
    if cfg.condition == "class":
        if labels is None:
            raise DataError("class-conditional training needs labels")
        label_tensor = torch.tensor([labels[k] for k in ids], dtype=torch.long)
        label_tensor = label_tensor.repeat(repeats)
    batch = stack.repeat(repeats, 1, 1)

    if cfg.estimate_sigma_data:
        cfg = dataclasses.replace(cfg, sigma_data=max(float(stack.std()), 1e-3),
                                  estimate_sigma_data=False)

    start_step = 0
    if resume is not None:
        model, meta, opt_tensors = load_ldm_checkpoint(resume)
        cfg = model.cfg
        start_step = int(meta.get("step", 0))
    else:
        model = build_denoiser(cfg, seed)
        opt_tensors = {}

    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    if opt_tensors:
        params = opt.param_groups[0]["params"]
        for i, p in enumerate(params):
            state = {}
            for key in ("exp_avg", "exp_avg_sq"):
                t = opt_tensors.get(f"opt.{i}.{key}")
                if t is not None:
                    state[key] = t.to(p.dtype)
            t = opt_tensors.get(f"opt.{i}.step")
            if t is not None:
                state["step"] = t.to(torch.float32)
            if state:
                opt.state[p] = state
        with warnings.catch_warnings():
            # fast-forward the schedule to the resume step
            warnings.simplefilter("ignore")
            for _ in range(start_step):
                sched.step()

    csv_path = os.path.join(out_dir, "ldm_metrics.csv")
    mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    csv_file = open(csv_path, mode, newline="")
    writer = csv.writer(csv_file)
    if mode == "w":
        writer.writerow(["epoch", "step", "lr", "loss", "loss_ema"])

    ckpt_path = os.path.join(out_dir, "ldm.atlg")
    ema = meta.get("loss_ema") if resume is not None else None
    for step in range(start_step, steps):
        gen = generator(seed, "ldm-step", step)
        loss = ldm_loss(model, batch, gen, label_tensor)
        value = float(loss.detach())
        if not math.isfinite(value):
            dump = os.path.join(out_dir, f"ldm_diagnostic_step{step}.atlg")
            save_ldm_checkpoint(dump, model, {"step": step})
            raise NonFiniteError(f"non-finite diffusion loss at step {step}; "
                                 f"state dumped to {dump}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        ema = value if ema is None else 0.95 * ema + 0.05 * value
        writer.writerow([step, step + 1, f"{sched.get_last_lr()[0]:.6g}",
                         f"{value:.6g}", f"{ema:.6g}"])
        if (step + 1) % checkpoint_every == 0 or step + 1 == steps:
            save_ldm_checkpoint(ckpt_path, model,
                                {"step": step + 1, "seed": seed, "loss_ema": ema}, opt=opt)
        if log_fn is not None and ((step + 1) % 50 == 0 or step + 1 == steps):
            log_fn(f"ldm step {step + 1}/{steps} loss {value:.5f} ema {ema:.5f}")
    csv_file.close()
    return {"checkpoint": ckpt_path, "metrics_csv": csv_path, "loss_ema": ema,
            "model": model, "config": cfg}
