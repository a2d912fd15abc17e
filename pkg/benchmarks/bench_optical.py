"""Time the optical forward/backward pass for both correlation backends.

    python benchmarks/bench_optical.py --batch 64 --repeat 5
"""
import argparse
import timeit

import torch

from privoptics.optics import OpticalLayer, SensorGeometry, init_kernel


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--pad", type=int, default=49)
    args = ap.parse_args(argv)

    torch.set_num_threads(args.threads)
    geometry = SensorGeometry(pad=args.pad)
    kernel = init_kernel(geometry, 0)
    x = torch.rand(args.batch, 1, *geometry.input_size)
    print(f"geometry {geometry.input_size} -> {geometry.output_size}, batch {args.batch}")
    for backend in ("direct", "fft"):
        layer = OpticalLayer(kernel, backend)

        def fwd():
            with torch.no_grad():
                layer(x)

        def fwd_bwd():
            layer.zero_grad()
            layer(x).sum().backward()

        for name, fn in (("forward", fwd), ("forward+backward", fwd_bwd)):
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            print(f"{backend:>6} {name:<17} {best * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
