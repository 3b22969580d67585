"""Federated learning over LEO mega-constellations: geometry, links, ring all-reduce,
max-flow GSL scheduling, training loops and convergence-bound evaluators."""

from .constellation import ConstellationSpec, GroundStation, SatId
from .channel import IslSpec, LinkBudget
from .orchestrator import PhysicalSetup, TrainConfig, run_fedisl, run_fedmega, run_hlsgd

__version__ = "0.1.0"
