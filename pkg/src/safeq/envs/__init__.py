from .base import EnvFault, EnvStep

__all__ = ["EnvFault", "EnvStep"]
