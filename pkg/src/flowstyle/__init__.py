"""Reference-conditioned stylization at desk scale.

A rectified-flow diffusion transformer trained with LoRA adapters under a
three-stage schedule on a procedurally generated stylization world, with
cutoff-gated content-preservation metrics and a first-frame-anchored
video variant.
"""

__version__ = "0.1.0"
