"""Hot LSTM kernels.

The compiled core (``_lstm``, built from Cython) is used when importable;
otherwise the numpy implementation in ``_fallback`` is.  Setting
``ATTNP_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

try:
    from . import _lstm as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKEND = "python"
_forced = os.environ.get("ATTNP_PURE_PYTHON", "") in ("1", "true", "yes")
if _compiled is not None and not _forced:
    lstm_forward = _compiled.lstm_forward
    lstm_backward = _compiled.lstm_backward
    BACKEND = "cython"
else:
    lstm_forward = _fallback.lstm_forward
    lstm_backward = _fallback.lstm_backward


def backends():
    """Name -> (forward, backward) for every available implementation."""
    out = {"python": (_fallback.lstm_forward, _fallback.lstm_backward)}
    if _compiled is not None:
        out["cython"] = (_compiled.lstm_forward, _compiled.lstm_backward)
    return out
