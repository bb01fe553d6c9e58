"""Mask-guided alpha matting with a progressive refinement network."""

from .core import MattingSample, composite, merge_foregrounds, resample
from .guidance import PerturbConfig, binarize, cutmask, dilate, encode_guidance, erode, perturb_guidance
from .model import PRN, ColorNet, ColorNetConfig, PRNConfig, prm_fuse, refine, self_guidance_from

__version__ = "0.1.0"
