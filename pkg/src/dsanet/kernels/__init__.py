"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations exist: numba-compiled loops
(`numba_impl`, the default when numba imports) and pure numpy
(`numpy_impl`). Select one with the DSANET_BACKEND environment variable
("numba" or "numpy") before import, or at runtime via set_backend().
``benchmarks/bench_kernels.py`` times the two side by side.

Both backends are deterministic run to run, but they accumulate sums in
different orders, so results may differ across backends in the last bits;
the CLI folds the active backend into its config hash for that reason.
"""

import os

from ..errors import ConfigError
from . import numpy_impl

_BACKENDS = {"numpy": numpy_impl}

try:
    from . import numba_impl

    _BACKENDS["numba"] = numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

_KERNELS = (
    "relu_fwd", "relu_bwd", "sigmoid_fwd", "sigmoid_bwd",
    "softmax_fwd", "softmax_bwd",
    "bn_train_fwd", "bn_train_bwd", "bn_infer_fwd", "bn_infer_bwd",
    "conv_collapse_fwd", "conv_collapse_bwd",
    "sad_rows_fwd", "sad_rows_bwd", "lhalf_rows_fwd", "lhalf_rows_bwd",
    "adam_update",
)

_active_name = None
_active = None


def available_backends():
    return sorted(_BACKENDS)


def get_backend():
    return _active_name


def set_backend(name):
    """Route all kernel calls through the named backend."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ConfigError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active_name = name
    _active = _BACKENDS[name]
    g = globals()
    for fn in _KERNELS:
        g[fn] = getattr(_active, fn)


def _default_backend():
    env = os.environ.get("DSANET_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise ConfigError(
                f"DSANET_BACKEND={env!r} not available; choices: {available_backends()}"
            )
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


set_backend(_default_backend())
