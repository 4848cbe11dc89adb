"""Articulated capsule body: skeleton, UV atlas, posed surface queries."""

from .atlas import TexelTable, UVAtlas
from .skeleton import (Bone, Joint, Pose, Skeleton, default_skeleton, fk,
                       read_pose, read_skeleton, rotmat, write_pose,
                       write_skeleton)
from .surface import (ImportedBody, OutOfManifoldError, PosedBody,
                      QuerySupport, export_body, rigid_repose)

__all__ = [
    "Bone", "ImportedBody", "Joint", "OutOfManifoldError", "Pose",
    "PosedBody", "QuerySupport", "Skeleton", "TexelTable", "UVAtlas",
    "default_skeleton", "export_body", "fk", "read_pose", "read_skeleton",
    "rigid_repose", "rotmat", "write_pose", "write_skeleton",
]
