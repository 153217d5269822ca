"""Time-aligned guidance for diffusion samplers on Gaussian-mixture toys."""

__version__ = "0.1.0"
