"""Compare the compiled and pure-Python XNOR-popcount backends.

Times the packed convolution at each encoder layer shape, the fused
sign/pool/pack step, and a whole packed EVS model, then prints one JSON
line per measurement.

    python3 benchmarks/bench_kernels.py --repeats 20
"""

import argparse
import json
import timeit

import numpy as np

from evfusion import bitops
from evfusion.model import CollisionNet, ModelConfig
from evfusion.quant.bitpack import binary_conv2d, pack_conv_input, pack_conv_weight
from evfusion.quant.qat import PackedModel, QuantScheme, export_packed, init_quantizers, qat_wrap

# (cin, cout, side) of the binarized encoder convolutions at default widths
LAYERS = [(8, 16, 40), (16, 32, 20), (32, 64, 10), (64, 64, 5), (64, 64, 5)]


def best_ms(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=10, help="timed runs per case; the best is reported")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    backends = bitops.available_backends()
    results = []

    for cin, cout, side in LAYERS:
        x = pack_conv_input(rng.choice([-1.0, 1.0], (1, cin, side, side)))
        w = pack_conv_weight(rng.choice([-1.0, 1.0], (cout, cin, 3, 3)))
        for name, impl in backends.items():
            ms = best_ms(lambda: binary_conv2d(x, w, kernels=impl), args.repeats)
            results.append({"case": f"conv {cin}->{cout} @{side}x{side}", "backend": name, "ms": ms})

    act = rng.standard_normal((1, 64, 10, 10)).astype(np.float32)
    shift = rng.standard_normal(64).astype(np.float32)
    for name, impl in backends.items():
        ms = best_ms(lambda: impl.sign_pack_conv(act, shift, True), args.repeats)
        results.append({"case": "sign+pool+pack 64@10x10", "backend": name, "ms": ms})

    net = CollisionNet(ModelConfig(modality="evs", seed=args.seed))
    q = qat_wrap(net, QuantScheme.parse("dorefa"))
    init_quantizers(q, rng.uniform(-1, 1, (4, 1, 80, 80)).astype(np.float32))
    packed = export_packed(q)
    frame = rng.uniform(-1, 1, (1, 1, 80, 80)).astype(np.float32)
    for name, impl in backends.items():
        model = PackedModel(packed.cfg, packed.scheme, packed.layers, impl)
        ms = best_ms(lambda: model.forward(frame), args.repeats)
        results.append({"case": "packed evs model, one window", "backend": name, "ms": ms})

    by_case = {}
    for r in results:
        by_case.setdefault(r["case"], {})[r["backend"]] = r["ms"]
    for case, times in by_case.items():
        line = {"case": case, **{f"{k}_ms": round(v, 4) for k, v in times.items()}}
        if "python" in times and "cython" in times:
            line["speedup"] = round(times["python"] / times["cython"], 2)
        print(json.dumps(line))


if __name__ == "__main__":
    main()
