"""Kernel backend selection.

The compiled extension is preferred when built; `PSINET_BACKEND=python`
or `=native` overrides the automatic choice. The active backend's name
is recorded in every resolved experiment config for reproducibility.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import native as _native_mod
except ImportError:
    _native_mod = None


def get_backend(name: str):
    if name == "python":
        return reference
    if name == "native":
        if _native_mod is None:
            raise ImportError("compiled backend not built; reinstall with cython available")
        return _native_mod
    raise ValueError(f"unknown backend {name!r}; expected 'python' or 'native'")


def available_backends() -> tuple[str, ...]:
    return ("python", "native") if _native_mod is not None else ("python",)


def _select():
    choice = os.environ.get("PSINET_BACKEND", "auto")
    if choice == "auto":
        return _native_mod if _native_mod is not None else reference
    return get_backend(choice)


active = _select()

conv2d_forward = active.conv2d_forward
conv2d_backward = active.conv2d_backward
maxpool2d_forward = active.maxpool2d_forward
maxpool2d_backward = active.maxpool2d_backward


def backend_name() -> str:
    return active.NAME
