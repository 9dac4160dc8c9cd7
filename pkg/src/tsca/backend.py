"""Kernel backend selection.

The compiled extension is preferred when importable; set TSCA_BACKEND to
"python" or "cython" to force a choice ("auto" is the default). Forcing
"cython" when the extension did not build raises the import error instead
of silently falling back.
"""

import os

from tsca import _pycore
from tsca.errors import ConfigError

_ALIASES = {
    "python": "python",
    "py": "python",
    "numpy": "python",
    "cython": "cython",
    "c": "cython",
    "compiled": "cython",
    "auto": "auto",
    "": "auto",
}


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    choice = _ALIASES.get(name.strip().lower())
    if choice is None:
        raise ConfigError(f"unknown backend {name!r}; use auto, python, or cython")
    if choice == "python":
        return _pycore
    if choice == "cython":
        from tsca import _ctcore

        return _ctcore
    try:
        from tsca import _ctcore

        return _ctcore
    except ImportError:
        return _pycore


kernels = get_backend(os.environ.get("TSCA_BACKEND", "auto"))


def backend_name() -> str:
    """Name of the kernel backend selected at import ("python" or "cython")."""
    return kernels.BACKEND
