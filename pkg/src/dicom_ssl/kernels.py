"""Backend selection for the hot kernels.

The compiled Cython extension is used when it was built; otherwise the numpy
fallback is imported. Set ``DICOM_SSL_PURE=1`` to force the fallback.
"""
import os

if os.environ.get("DICOM_SSL_PURE", "") not in ("", "0"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"

group_mask = _impl.group_mask
directed_min_dist = _impl.directed_min_dist
silhouette_samples = _impl.silhouette_samples
tie_grouped_counts = _impl.tie_grouped_counts

__all__ = ["BACKEND", "group_mask", "directed_min_dist", "silhouette_samples",
           "tie_grouped_counts"]
