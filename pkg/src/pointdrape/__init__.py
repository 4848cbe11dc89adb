"""pointdrape: pose-driven dense point-cloud clothing on an articulated
capsule body.

A garment is represented as a displacement field over the body's UV manifold:
a shared decoder maps (uv, pose feature, garment feature) to a local
displacement and normal per surface query, which a per-point rigid transform
carries into world space. Training jointly fits the shared networks and one
auto-decoded geometry tensor per outfit; a single scan of an unseen outfit is
fitted by optimizing a fresh geometry tensor with frozen networks, after which
the outfit can be animated to arbitrary poses.
"""

__version__ = "0.1.0"
