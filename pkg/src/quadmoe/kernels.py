"""Backend selection for the batched kernels.

The compiled extension is used when it imports; otherwise the numpy version.
Setting ``QUADMOE_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("QUADMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

CHUNK = _kernels_py.CHUNK


def _codes(family):
    if family.kind == "linear":
        return _kernels_py.LINEAR, 0, 0
    return _kernels_py.TWO_LAYER, family.m, (_kernels_py.RELU if family.activation == "relu" else _kernels_py.TANH)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def predict(X, A, B, C, Eta, family, top_k=None, impl=None):
    fam, m, act = _codes(family)
    impl = impl or _impl
    return impl.predict(_c(X), _c(A), _c(B), _c(C), _c(Eta), fam, m, act, int(top_k or 0))


def loss_grad(X, Y, A, B, C, Eta, family, top_k=None, impl=None):
    """Return ``(sse, dA, dB, dC, dEta)`` for the sum of squared residuals."""
    fam, m, act = _codes(family)
    impl = impl or _impl
    return impl.loss_grad(
        _c(X), _c(Y), _c(A), _c(B), _c(C), _c(Eta), fam, m, act, int(top_k or 0)
    )


def available_backends():
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
