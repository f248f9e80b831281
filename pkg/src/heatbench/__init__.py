"""heatbench: pixel-wise explanation heatmaps for small convolutional
classifiers, evaluated objectively by region perturbation (MoRF/LeRF
trajectories, AOPC/ABPC) and complexity metrics."""

__version__ = "0.1.0"

from . import attribution, complexity, datahub, netcore, perturbeval

__all__ = ["attribution", "complexity", "datahub", "netcore", "perturbeval",
           "__version__"]
