"""Hyper-densely connected 3-D fully convolutional networks for multi-modal
brain tissue segmentation, with a numpy autodiff engine, synthetic phantoms,
tiled inference and surface-distance metrics."""
from .netbuild import NetworkSpec, build, plan_channels, standard_spec
from .phantom import PhantomConfig, generate
from .rng import Rng

__version__ = "0.1.0"

__all__ = ["NetworkSpec", "PhantomConfig", "Rng", "build", "generate", "plan_channels",
           "standard_spec"]
