"""Time the hot kernels with numba and with the numpy fallback.

Each backend runs in a fresh interpreter because the switch is read at
import time (``HFNN_DISABLE_NUMBA``). Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 256] [--width 64]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from hfnn import _accel, nn
from hfnn.autodiff import tensor as T
from hfnn.physics import nse_residual_jet

repeat, batch, width = map(int, sys.argv[1:4])
rng = np.random.default_rng(0)

def best(fn):
    fn()  # compile / warm caches
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter(); fn(); ts.append(time.perf_counter() - t0)
    return min(ts)

z = rng.normal(size=(7, batch, width))
g = rng.normal(size=(7, batch, width))
h = _accel.tanh_jet_forward(z, 3)[0]
U, V, t = (rng.normal(size=(7, batch, width)) for _ in range(3))
spec = nn.NetworkSpec(3, 4, 4, width, kind="modified-mlp", embedding="fourier", fourier_e=32, factorization="rwf")
store = nn.init(spec)
x = rng.random((batch, 3))

def train_step():
    leaves = store.leaves()
    O = nn.forward_jet(store, x, order=2, leaves=leaves)
    loss = T.masked_mse(nse_residual_jet(O, 1.0, 0.01))
    T.backprop(loss, leaves)

from hfnn.autodiff import Tape
def tape_sweep():
    tp = Tape()
    xs = [tp.input(v) for v in (0.1, 0.2, 0.3)]
    y = nn.tape_forward(store, xs)
    tp.gradient(y[0], xs)

tp2 = Tape()
xs2 = [tp2.input(v) for v in (0.1, 0.2, 0.3)]
y2 = nn.tape_forward(store, xs2)
def tape_hessian_diag():
    for xj in xs2:
        tp2.input_hessian_diag(y2[0], xj)

out = {
    "backend": "numba" if _accel.USE_NUMBA else "numpy",
    "tanh_jet_forward": best(lambda: _accel.tanh_jet_forward(z, 3)),
    "tanh_jet_backward": best(lambda: _accel.tanh_jet_backward(z, h, g, 3)),
    "gate_jet_forward": best(lambda: _accel.gate_jet_forward(t, U, V, 3)),
    "gate_jet_backward": best(lambda: _accel.gate_jet_backward(t, U, V, g, 3)),
    "pinn_train_step": best(train_step),
    "tape_gradient_one_point": best(tape_sweep),
    "tape_hessian_diag_3_inputs": best(tape_hessian_diag),
}
print(json.dumps(out))
"""


def run(disable, args):
    env = dict(os.environ)
    if disable:
        env["HFNN_DISABLE_NUMBA"] = "1"
    else:
        env.pop("HFNN_DISABLE_NUMBA", None)
    res = subprocess.run(
        [sys.executable, "-c", CHILD, str(args.repeat), str(args.batch), str(args.width)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--json", action="store_true", help="print raw JSON instead of a table")
    args = ap.parse_args()
    a, b = run(False, args), run(True, args)
    if args.json:
        print(json.dumps({"numba": a, "numpy": b}, indent=2))
        return
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for k in a:
        if k == "backend":
            continue
        print(f"{k:28s} {1e3 * a[k]:10.3f} {1e3 * b[k]:10.3f} {b[k] / a[k]:8.2f}")


if __name__ == "__main__":
    main()
