"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it has been built; set
``TRNET_KERNELS=python`` to force the fallback.
"""

import os

BACKEND = "python"

if os.environ.get("TRNET_KERNELS", "").lower() != "python":
    try:
        from ._ckernels import (  # noqa: F401
            col2im3d, im2col3d, maxpool3d_backward, maxpool3d_forward, rotate_slices,
        )
        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from ._pykernels import (  # noqa: F401
        col2im3d, im2col3d, maxpool3d_backward, maxpool3d_forward, rotate_slices,
    )

__all__ = ["BACKEND", "im2col3d", "col2im3d", "maxpool3d_forward",
           "maxpool3d_backward", "rotate_slices"]
