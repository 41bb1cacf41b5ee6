"""Two-stage geometry and material reconstruction from posed images.

Stage 1 trains a tensor-factorized signed distance field jointly against a
radiance field and a reflectance field, with a roughness-aware blend of the
two photometric losses. Stage 2 freezes geometry, fuses mesh ray hits with
the signed distance field, and fits spatially varying materials by Monte
Carlo shading.
"""

__version__ = "0.1.0"
