"""Learned assembly of multi-chain complexes by docking chains along spanning trees."""

from . import adversary, data, env, geom, nn, policy, search, trainer, trees  # noqa: F401
from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
