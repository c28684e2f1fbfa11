"""Compare the compiled kernels with the numpy fallback.

Times each kernel on the shapes the 29-voxel CNN actually uses, then a
full CNN forward/backward over a batch of cubes with each backend swapped
in. Results are printed as a table; nothing is written to disk.

    python3 benchmarks/bench_kernels.py --cubes 32 --repeat 3
"""

import argparse
import time

import numpy as np

from trnet import kernels
from trnet import model as M
from trnet.kernels import _pykernels

try:
    from trnet.kernels import _ckernels
except ImportError:
    _ckernels = None

NAMES = ("im2col3d", "col2im3d", "maxpool3d_forward", "maxpool3d_backward", "rotate_slices")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(n, rng):
    # first conv stage dominates: 1 -> 16 channels at 29^3, then 16 -> 32 at 14^3
    x = rng.normal(size=(n, 16, 14, 14, 14)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = rng.normal(size=(n, 16 * 27, 14 ** 3)).astype(np.float32)
    r = np.maximum(rng.normal(size=(n, 16, 29, 29, 29)), 0).astype(np.float32)
    cube = rng.normal(size=(29, 29, 29)).astype(np.float32)

    def cases(impl):
        y, arg = impl.maxpool3d_forward(r)
        dy = np.ones_like(y)
        return {
            "im2col3d": lambda: impl.im2col3d(xp),
            "col2im3d": lambda: impl.col2im3d(cols, 14),
            "maxpool3d_forward": lambda: impl.maxpool3d_forward(r),
            "maxpool3d_backward": lambda: impl.maxpool3d_backward(dy, arg, 29),
            "rotate_slices": lambda: [impl.rotate_slices(cube, 0.3) for _ in range(n)],
        }
    return cases


def cnn_step(cubes, params, cfg):
    _, flat, cache = M.cnn_forward(cubes, params, cfg)
    M.cnn_backward(np.ones_like(flat), cache, params, cfg)


def use_backend(impl):
    for name in NAMES:
        setattr(kernels, name, getattr(impl, name))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cubes", type=int, default=32, help="cubes per call")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = {"numpy": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    cases = kernel_cases(args.cubes, rng)
    rows = {}
    for label, impl in impls.items():
        for name, fn in cases(impl).items():
            rows.setdefault(name, {})[label] = best_of(fn, args.repeat)

    cfg = M.ModelConfig()
    params = M.init_params(cfg, seed=args.seed)
    cubes = rng.normal(0, 300, size=(args.cubes, 29, 29, 29)).astype(np.float32)
    original = {name: getattr(kernels, name) for name in NAMES}
    try:
        for label, impl in impls.items():
            use_backend(impl)
            rows.setdefault("cnn forward+backward", {})[label] = best_of(
                lambda: cnn_step(cubes, params, cfg), args.repeat)
    finally:
        for name, fn in original.items():
            setattr(kernels, name, fn)

    labels = list(impls)
    print(f"{'kernel':<22}" + "".join(f"{l + ' (s)':>14}" for l in labels)
          + ("   speedup" if len(labels) == 2 else ""))
    for name, t in rows.items():
        line = f"{name:<22}" + "".join(f"{t[l]:>14.4f}" for l in labels)
        if len(labels) == 2:
            line += f"   {t['numpy'] / t['cython']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
