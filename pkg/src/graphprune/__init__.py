"""Channel pruning with a graph-aggregated hypernetwork and a DDPG ratio search."""

from .graph import ModelGraph, load_bundled, load_model_description, parse_model_description

__version__ = "0.1.0"

__all__ = ["ModelGraph", "load_bundled", "load_model_description", "parse_model_description", "__version__"]
