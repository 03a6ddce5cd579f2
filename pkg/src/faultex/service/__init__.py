"""Session-oriented recovery service: failed episodes, explanations, human recovery."""

from .app import create_app
from .sessions import ServiceDeps, SessionStore, default_deps

__all__ = ["create_app", "ServiceDeps", "SessionStore", "default_deps"]
