"""roundfit: weight-only quantization with signed-gradient rounding/clip tuning.

Submodules are imported lazily so the CLI can apply the RF_THREADS cap to
the numeric backend before it loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "quant", "packing", "tensorfile", "model",
               "calib", "tuner", "oracle", "compare", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
