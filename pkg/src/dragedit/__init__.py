"""Drag-and-instruct image editing on a small trainable diffusion backbone.

Move an object by dragging its mask and simultaneously rewrite the prompt:
a dual-branch diffusion sampler reconstructs the relocated object under the
source prompt while a second branch applies the text edit, sharing the first
branch's energy-guidance gradients and attention maps.
"""
__version__ = "0.1.0"

from .backbone import BackboneConfig, ToyBackbone
from .errors import DragEditError
from .inversion import NoiseTrajectory, ShiftSpec, ddpm_invert, replay
from .masks import RegionMasks
from .pipeline import EditResult, EditSpec, run_edit, run_paste

__all__ = [
    "BackboneConfig", "ToyBackbone", "DragEditError", "NoiseTrajectory",
    "ShiftSpec", "ddpm_invert", "replay", "RegionMasks", "EditSpec",
    "EditResult", "run_edit", "run_paste", "__version__",
]
