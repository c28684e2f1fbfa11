"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same results (bit-identical for im2col/col2im/pooling, 1e-12 for
rotation).
"""

import numpy as np

# (dz, dy, dx) offsets of a 3x3x3 stencil, in kernel-weight order
OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def im2col3d(xp):
    """Unfold a zero-padded batch ``(n, C, S+2, S+2, S+2)`` into
    ``(n, C*27, S**3)`` columns for a 3x3x3 same-padded convolution."""
    n, C = xp.shape[:2]
    S = xp.shape[2] - 2
    cols = np.empty((n, C, 27, S, S, S), dtype=xp.dtype)
    for k, (a, b, c) in enumerate(OFFSETS):
        cols[:, :, k] = xp[:, :, a:a + S, b:b + S, c:c + S]
    return cols.reshape(n, C * 27, S ** 3)


def col2im3d(cols, S):
    """Adjoint of :func:`im2col3d`: scatter-add columns back onto the
    padded grid, then strip the padding."""
    n = cols.shape[0]
    C = cols.shape[1] // 27
    cols = cols.reshape(n, C, 27, S, S, S)
    xp = np.zeros((n, C, S + 2, S + 2, S + 2), dtype=cols.dtype)
    for k, (a, b, c) in enumerate(OFFSETS):
        xp[:, :, a:a + S, b:b + S, c:c + S] += cols[:, :, k]
    return xp[:, :, 1:-1, 1:-1, 1:-1]


def _blocks(x):
    n, C, S = x.shape[:3]
    h = S // 2
    xc = x[:, :, :2 * h, :2 * h, :2 * h]
    xb = xc.reshape(n, C, h, 2, h, 2, h, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return xb.reshape(n, C, h, h, h, 8)


def maxpool3d_forward(x):
    """2x2x2 max-pool with floor division on odd sizes.

    Returns the pooled array and the argmax position (0..7) inside each
    window; ties resolve to the first maximum in (z, y, x) raster order.
    """
    xb = _blocks(x)
    arg = xb.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(xb, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool3d_backward(dy, arg, S):
    n, C, h = dy.shape[:3]
    db = np.zeros((n, C, h, h, h, 8), dtype=dy.dtype)
    np.put_along_axis(db, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
    db = db.reshape(n, C, h, h, h, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros((n, C, S, S, S), dtype=dy.dtype)
    dx[:, :, :2 * h, :2 * h, :2 * h] = db.reshape(n, C, 2 * h, 2 * h, 2 * h)
    return dx


def rotate_slices(cube, angle):
    """Rotate every slice ``cube[z]`` by ``angle`` radians about the centre
    pixel, bilinear interpolation, samples outside the slice clamped to the
    nearest edge pixel."""
    cube = np.asarray(cube)
    dtype = cube.dtype if cube.dtype.kind == "f" else np.float64
    cube = cube.astype(np.float64, copy=False)
    _, H, W = cube.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    cos, sin = np.cos(angle), np.sin(angle)
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # inverse map: output pixel p samples input at R(-angle) p
    sy = cos * yy - sin * xx + cy
    sx = sin * yy + cos * xx + cx
    # snap round-off so exact quarter turns stay exact
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.clip(sy, 0, H - 1)
    sx = np.clip(sx, 0, W - 1)
    y0 = np.minimum(np.floor(sy).astype(np.intp), H - 2) if H > 1 else np.zeros_like(sy, dtype=np.intp)
    x0 = np.minimum(np.floor(sx).astype(np.intp), W - 2) if W > 1 else np.zeros_like(sx, dtype=np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ty = sy - y0
    tx = sx - x0
    out = ((1 - ty) * (1 - tx) * cube[:, y0, x0] + (1 - ty) * tx * cube[:, y0, x1]
           + ty * (1 - tx) * cube[:, y1, x0] + ty * tx * cube[:, y1, x1])
    return out.astype(dtype, copy=False)
