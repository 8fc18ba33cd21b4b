"""Ship classification networks: residual backbones with channel/spatial
attention, a numpy autodiff core, data pipeline, training and reporting."""

__version__ = "0.1.0"
