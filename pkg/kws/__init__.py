"""kws package: TENet keyword spotting with multi-scale temporal convolution."""

__all__ = [
    "tensor",
    "frontend",
    "model",
    "fusion",
    "trainer",
    "dataset",
    "container",
    "cli",
    "config",
]
