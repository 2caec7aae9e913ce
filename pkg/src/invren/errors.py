"""Exception types shared across the package.

Every error raised on bad user input carries enough context (indices, line
numbers, file paths) to locate the offending datum without a debugger.
"""

from __future__ import annotations


class InvrenError(Exception):
    """Base class for all package errors."""


class MeshError(InvrenError):
    """Invalid mesh data: bad indices, degenerate faces, non-manifold edges."""


class SceneError(InvrenError):
    """Invalid scene data: cameras, textures, environment maps, images."""


class ConfigError(InvrenError):
    """Malformed or inconsistent configuration input."""


class RenderError(InvrenError):
    """Renderer precondition violations."""


class OptimError(InvrenError):
    """Optimization failures, such as non-finite gradients."""
