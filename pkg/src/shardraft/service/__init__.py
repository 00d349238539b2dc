"""HTTP service hosting an in-process deployment of clusters."""

from .app import create_app
from .runtime import ServiceRuntime

__all__ = ["create_app", "ServiceRuntime"]
