"""Bayesian mixed-effects quantile regression with AL, GAL and contaminated-GAL errors."""
from ._accel import backend
from .dist import (
    AlParams,
    CgalParams,
    GalParams,
    RngStream,
    al_logpdf,
    cgal_cdf,
    cgal_logpdf,
    cgal_sample,
    gal_cdf,
    gal_logpdf,
    gal_sample,
    gamma_bounds,
)

__all__ = [
    "backend", "AlParams", "CgalParams", "GalParams", "RngStream", "al_logpdf", "cgal_cdf", "cgal_logpdf",
    "cgal_sample", "gal_cdf", "gal_logpdf", "gal_sample", "gamma_bounds",
]
__version__ = "0.1.0"
