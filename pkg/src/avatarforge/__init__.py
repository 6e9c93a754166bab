"""avatarforge: explicit human avatars from monocular frame sequences.

A deformable SDF is trained from posed frames by volume rendering, fused into
pseudo multi-view supervision, converted to an explicit triangle mesh with
physically-based material textures under a learnable environment light, and
finished with score-distillation texture super-resolution.
"""

__version__ = "0.1.0"
