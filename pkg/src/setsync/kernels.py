"""Kernel backend selection.

The compiled extension (``setsync._speedups``) is preferred; the pure-Python
twin (``setsync._fallback``) is used when the extension is missing or when
the SETSYNC_PURE environment variable is set to a non-empty value.  Both
expose identical functions with bit-identical results.
"""

import os

if os.environ.get("SETSYNC_PURE"):
    from . import _fallback as _impl

    BACKEND = "pure"
else:
    try:
        from . import _speedups as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - build-dependent
        from . import _fallback as _impl

        BACKEND = "pure"

M61 = (1 << 61) - 1

mulmod = _impl.mulmod
addmod = _impl.addmod
submod = _impl.submod
hash_words = _impl.hash_words
iblt_apply = _impl.iblt_apply
iblt_peel = _impl.iblt_peel
bucket_update = _impl.bucket_update
charpoly_eval = _impl.charpoly_eval
poly_eval_many = _impl.poly_eval_many
poly_mulmod = _impl.poly_mulmod


def get_backends():
    """Return (compiled_or_None, fallback) module pair for benchmarks/tests."""
    from . import _fallback

    try:
        from . import _speedups  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - build-dependent
        _speedups = None
    return _speedups, _fallback
