"""Adaptive discretization and a posteriori error estimation for Tikhonov regularization.

Submodules: ``mesh``, ``fem``, ``tikhonov``, ``estimators``, ``adaptive``,
``benchmark`` and ``cli``.  They are imported on first attribute access so
that the command line can configure BLAS threads before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("mesh", "fem", "tikhonov", "estimators", "adaptive", "benchmark", "cli",
               "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
