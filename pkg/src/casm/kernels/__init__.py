"""Hot-kernel dispatch: compiled extension when built, NumPy fallback otherwise.

The two backends implement the same three functions with identical contracts
(attention_forward, attention_backward, scatter_rows_add); key masks must be
left-padded validity masks (padding forms a prefix of each row). The active
backend is chosen once at import: the compiled extension if it is importable,
else NumPy. Override with CASM_BACKEND=numpy|cython or use_backend().
"""

import os

from casm.errors import ConfigError
from casm.kernels import _reference

_BACKENDS = {"numpy": _reference}

try:
    from casm.kernels import _attention_cy

    _BACKENDS["cython"] = _attention_cy
except ImportError:
    _attention_cy = None

_env = os.environ.get("CASM_BACKEND", "auto")
if _env == "auto":
    _active_name = "cython" if "cython" in _BACKENDS else "numpy"
elif _env in _BACKENDS:
    _active_name = _env
else:
    raise ConfigError(f"CASM_BACKEND={_env!r} not available; have {sorted(_BACKENDS)}")


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active_name


def use_backend(name):
    """Switch the active backend (mainly for benchmarking both)."""
    global _active_name
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}")
    _active_name = name


def attention_forward(q, k, v, key_mask):
    return _BACKENDS[_active_name].attention_forward(q, k, v, key_mask)


def attention_backward(d_ctx, probs, q, k, v, key_mask):
    return _BACKENDS[_active_name].attention_backward(d_ctx, probs, q, k, v, key_mask)


def scatter_rows_add(table, ids, rows):
    return _BACKENDS[_active_name].scatter_rows_add(table, ids, rows)
