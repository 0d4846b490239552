"""Monte Carlo laboratory for Brownian loop soups and simple conformal loop
ensembles in discs, annuli and punctured domains."""

from .model import (
    ConstantPack,
    DomainSpec,
    MCEstimate,
    PlanarLoop,
    SoupCutoffs,
    default_cutoffs,
    make_constants,
    stream_rng,
)

__all__ = [
    "ConstantPack",
    "DomainSpec",
    "MCEstimate",
    "PlanarLoop",
    "SoupCutoffs",
    "default_cutoffs",
    "make_constants",
    "stream_rng",
]

__version__ = "0.1.0"
