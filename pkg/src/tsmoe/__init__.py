"""Probabilistic time series forecasting with a sparse mixture-of-experts
transformer: patch tokenization, causal-prefix normalization, top-k expert
routing with linear or cluster-centroid gating, mixture-density output head,
and a full train / forecast / evaluate / analyze toolchain on a small numpy
autodiff core with optional compiled kernels."""

__version__ = "0.1.0"
