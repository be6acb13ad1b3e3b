"""atlasgs: patch-decoded 3D Gaussians, a set-latent VAE, and EDM latent diffusion."""

from .atlas import (AtlasDecoder, Gaussian3D, Gaussians, Patch, PatchSet,
                    decode_atlas, sample_uv_grid, sample_uv_random)
from .diffusion import Denoiser, EDMConfig, precondition, sample
from .geometry import (PointCloud, chamfer, emd_approx, emd_exact,
                       farthest_point_sampling, kl_diag_gaussian)
from .render import Camera, RenderOutput, rasterize, rasterize_reference
from .vae import AtlasVAE, LatentSet, ShapeInput, VAEConfig, build_vae

__version__ = "0.1.0"

__all__ = [
    "AtlasDecoder", "AtlasVAE", "Camera", "Denoiser", "EDMConfig", "Gaussian3D",
    "Gaussians", "LatentSet", "Patch", "PatchSet", "PointCloud", "RenderOutput",
    "ShapeInput", "VAEConfig", "build_vae", "chamfer", "decode_atlas",
    "emd_approx", "emd_exact", "farthest_point_sampling", "kl_diag_gaussian",
    "precondition", "rasterize", "rasterize_reference", "sample",
    "sample_uv_grid", "sample_uv_random",
]
