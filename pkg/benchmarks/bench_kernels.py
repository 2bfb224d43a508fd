"""Numba vs numpy timings for the hot kernels, plus an optional training-step run.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --e2e 200  # also 200 training steps per backend
"""
import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from kdspd import kernels


def timed(fn, *args, repeat=7, number=20):
    fn(*args)  # warm-up (and numba compile)
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn(*args)
        runs.append((time.perf_counter() - t0) / number)
    return statistics.median(runs)


def cases(rng):
    # shapes seen during training: B=16 rows, M=4 heads, l=8 prompt rows, n<=33 keys, d=32
    att = rng.standard_normal((16 * 4 * 8, 33)).astype(np.float32)
    gy_att = rng.standard_normal(att.shape).astype(np.float32)
    rows = rng.standard_normal((16 * 33, 32)).astype(np.float32)
    gain = np.ones(32, np.float32)
    bias = np.zeros(32, np.float32)
    ln = kernels.layer_norm_np(rows, gain, bias, np.float32(1e-5))
    ids = rng.integers(0, 615, size=16 * 33)
    scores = rng.standard_normal(100_000)
    tie = rng.permutation(100_000).astype(np.int64)
    owners = np.sort(rng.integers(0, 40_000, size=100_000))
    sm = kernels.softmax_rows_np(att.copy())
    return {
        "softmax_rows": ((att,), lambda a: a.copy()),
        "softmax_rows_grad": ((sm, gy_att), None),
        "layer_norm": ((rows, gain, bias, np.float32(1e-5)), None),
        "layer_norm_grad": ((rows, ln[1], ln[2], gain), None),
        "scatter_add_rows": ((615, ids, rows), None),
        "topk_desc (n=1e5, k=1000)": ((scores, tie, 1000), None),
        "segment_max (1e5 -> 4e4)": ((scores, owners, 40_000), None),
    }


KERNEL_OF = {"topk_desc (n=1e5, k=1000)": "topk_desc", "segment_max (1e5 -> 4e4)": "segment_max"}


def kernel_table():
    rng = np.random.default_rng(0)
    rows = []
    for label, (args, prep) in cases(rng).items():
        name = KERNEL_OF.get(label, label)
        fn_np = getattr(kernels, name + "_np")
        fn_nb = getattr(kernels, name + "_nb")
        if prep is not None:  # numpy softmax works in place on its input
            t_np = timed(lambda a: fn_np(prep(a)), *args)
        else:
            t_np = timed(fn_np, *args)
        t_nb = timed(fn_nb, *args)
        rows.append((label, t_np * 1e6, t_nb * 1e6, t_np / t_nb))
    return rows


E2E = """
import json, sys, time
from kdspd.corpus import CipherSpec, gen_cipher_corpus
from kdspd.model import SpdConfig, SpdModel
from kdspd.teacher import SyntheticTeacher
from kdspd.train import TrainConfig, train
from kdspd import kernels
steps = int(sys.argv[1])
corpus = gen_cipher_corpus(CipherSpec(n_train_pairs=steps * 4, n_heldout_pairs=1), 0)
cfg = SpdConfig(d=32, l=8, N=2, M=4, d_ffn=64, vocab_size=len(corpus.vocab), max_seq_len=32,
                languages=corpus.train_languages)
model = SpdModel(cfg, vocab=corpus.vocab.words)
t0 = time.perf_counter()
train(model, SyntheticTeacher(32), corpus.bitext, TrainConfig(learning_rate=3e-3, max_seq_len=32),
      vocab=corpus.vocab)
print(json.dumps({"backend": kernels.backend(), "seconds": time.perf_counter() - t0}))
"""


def e2e(steps):
    out = {}
    for disable in ("0", "1"):
        env = dict(os.environ, SPD_DISABLE_NUMBA=disable)
        proc = subprocess.run([sys.executable, "-c", E2E, str(steps)], env=env,
                              capture_output=True, text=True, check=True)
        res = json.loads(proc.stdout.strip().splitlines()[-1])
        out[res["backend"]] = res["seconds"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", type=int, default=0, metavar="STEPS",
                    help="also time STEPS training steps under each backend")
    args = ap.parse_args()
    print(f"{'kernel':<28}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for label, t_np, t_nb, ratio in kernel_table():
        print(f"{label:<28}{t_np:>12.1f}{t_nb:>12.1f}{ratio:>9.2f}x")
    if args.e2e:
        res = e2e(args.e2e)
        print(f"\n{args.e2e} training steps: numpy {res['numpy']:.2f}s, numba {res['numba']:.2f}s "
              f"({res['numpy'] / res['numba']:.2f}x)")


if __name__ == "__main__":
    main()
