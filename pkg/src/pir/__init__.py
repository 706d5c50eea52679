"""Desk-scale parametric implicit face pipeline.

Audio features -> expression parameters (biased-attention transformer) ->
tri-plane implicit field -> volume-rendered feature map -> inpainting renderer.
"""

__version__ = "0.1.0"
