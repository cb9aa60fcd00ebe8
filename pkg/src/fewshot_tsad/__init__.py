"""Few-shot semi-supervised anomaly detection for multivariate time series."""
