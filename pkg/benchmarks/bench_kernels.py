"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the default training run: a 64-utterance batch packed into one
~1000-frame sequence per PSA branch (64 channels per group at width 256) and
64x64 similarity matrices for the contrastive loss. A tiny case shows the
per-call overhead regime of the gradient checker.

The compiled convolution loops lose to BLAS at training widths; the numba
backend therefore only uses them below ``kernels.CONV_LOOP_MAX_WORK``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mcncl import kernels as K

CASES = {
    "conv1d_forward": lambda rng, L, c, k: (
        (rng.standard_normal((L, c)), rng.standard_normal((k, c, c)), rng.standard_normal(c)),
        K.conv1d_forward_numpy,
        K.conv1d_forward_numba,
    ),
    "conv1d_backward": lambda rng, L, c, k: (
        (rng.standard_normal((L, c)), rng.standard_normal((L, c)), rng.standard_normal((k, c, c))),
        K.conv1d_backward_numpy,
        K.conv1d_backward_numba,
    ),
}


def contrastive_args(rng, n, d=32, k=3, tau=0.07, frac=0.3):
    z = rng.standard_normal((n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    sim = z @ z.T
    labels = rng.integers(0, k, n)
    mask = K.hard_negative_mask_numpy(sim, labels, frac)
    return sim, labels, tau, frac, mask


def best_of(fn, args, repeat: int) -> float:
    fn(*args)  # compile / warm caches
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def run(repeat: int) -> list:
    rng = np.random.default_rng(0)
    rows = []
    for name in ("conv1d_forward", "conv1d_backward"):
        for L, c, k in ((1000, 64, 3), (1000, 64, 9), (60, 2, 9)):
            args, f_np, f_nb = CASES[name](rng, L, c, k)
            rows.append((f"{name} L={L} C={c} k={k}", best_of(f_np, args, repeat), best_of(f_nb, args, repeat)))
    for n in (64, 8):
        sim, labels, tau, frac, mask = contrastive_args(rng, n)
        rows.append(
            (
                f"hard_negative_mask N={n}",
                best_of(K.hard_negative_mask_numpy, (sim, labels, frac), repeat),
                best_of(K.hard_negative_mask_numba, (sim, labels, frac), repeat),
            )
        )
        rows.append(
            (
                f"supcon_terms N={n}",
                best_of(K.supcon_terms_numpy, (sim, labels, tau, mask), repeat),
                best_of(K.supcon_terms_numba, (sim, labels, tau, mask), repeat),
            )
        )
    return rows


_E2E_SNIPPET = """
import timeit, numpy as np
from mcncl import BACKEND
from mcncl.checks import tiny_batch, tiny_model_config
from mcncl.config import GradcheckSection
from mcncl.model import MCNCL
from mcncl.numcore import Tape
cfg = GradcheckSection()
model = MCNCL(tiny_model_config(cfg))
batch = tiny_batch(cfg, np.random.default_rng(0))
def step():
    with Tape() as tape:
        tape.backward(model.forward(batch, 1.0).loss)
step()
print(BACKEND, min(timeit.repeat(step, number=50, repeat=3)) / 50)
"""


def end_to_end() -> dict:
    """Seconds per forward+backward of the tiny gradcheck model under each backend."""
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, MCNCL_DISABLE_JIT=flag)
        res = subprocess.run([sys.executable, "-c", _E2E_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json", metavar="PATH")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = run(args.repeat)
    print(f"{'kernel':<38} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<38} {t_np * 1e6:>10.1f} {t_nb * 1e6:>10.1f} {t_np / t_nb:>7.2f}x")
    e2e = end_to_end()
    print(f"{'tiny model fwd+bwd':<38} {e2e['numpy'] * 1e6:>10.1f} {e2e['numba'] * 1e6:>10.1f} {e2e['numpy'] / e2e['numba']:>7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(
                {"kernels": [{"kernel": n, "numpy_s": a, "numba_s": b} for n, a, b in rows], "end_to_end_s": e2e},
                fh,
                indent=2,
            )


if __name__ == "__main__":
    main()
