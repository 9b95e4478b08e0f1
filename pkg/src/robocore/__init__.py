"""Software model of the RoboCore collision-detection accelerator."""

from . import geom, isa, oracle, scene, simcore, workloads

__version__ = "0.1.0"

__all__ = ["geom", "isa", "oracle", "scene", "simcore", "workloads", "__version__"]
