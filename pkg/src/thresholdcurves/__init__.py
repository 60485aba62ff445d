"""Latent-class threshold regression for time-to-decision response curves."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    comparators,
    data,
    effects,
    emfit,
    errors,
    fpt,
    latentmodel,
    sensitivity,
    simlab,
)
