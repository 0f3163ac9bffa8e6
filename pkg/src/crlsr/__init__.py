"""Blind super-resolution with contrastive feature decoupling and refinement,
on a small reverse-mode autodiff engine written in NumPy."""

from .autodiff import Tensor, grad_check, no_grad, precision
from .degradation import DegradationSpec, GaussianKernelSpec, KernelField, NoiseSpec, degrade
from .imaging import load_png, psnr_y, save_png
from .network import NetConfig, forward_infer, init_params, load_checkpoint, save_checkpoint
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "DegradationSpec", "GaussianKernelSpec", "KernelField", "NetConfig", "NoiseSpec", "Rng", "Tensor",
    "degrade", "forward_infer", "grad_check", "init_params", "load_checkpoint", "load_png", "no_grad",
    "precision", "psnr_y", "save_checkpoint", "save_png",
]
