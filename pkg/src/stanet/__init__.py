"""Per-cell BEV classification and motion forecasting from LiDAR sweeps, using
attention over space and time and a small numpy autodiff engine."""

__version__ = "0.1.0"
