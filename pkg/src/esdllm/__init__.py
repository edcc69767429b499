"""Desk-scale inference engine for mask-based diffusion language models.

Three decoding strategies share one toy transformer: full recomputation
(``vanilla``), block-level K/V caching (``dualcache``) and importance-driven
early skipping (``es_dllm``). Every matrix product is FLOP-counted.
"""

__version__ = "0.1.0"
