"""Sampling-frequency conversion with windowed-sinc, noisy and learned kernels."""

from sfresample.kernels import KernelConfig, KernelTable, discretize_kernel
from sfresample.resampler import Method, ResampleSpec, Signal, output_length, resample

__all__ = ["KernelConfig", "KernelTable", "Method", "ResampleSpec", "Signal",
           "discretize_kernel", "output_length", "resample"]
__version__ = "0.1.0"
