"""Numba vs pure-numpy kernels on watermarked generation and green counting.

Each backend runs in its own interpreter because the switch
(``RVQMARK_DISABLE_NUMBA``) is read at import time. The parent prints a
timing table and checks that both backends produced identical outputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--steps 200] [--vocab 2048]
"""
import argparse
import hashlib
import json
import os
import subprocess
import sys
import time


def child(args):
    import numpy as np

    from rvqmark import kernels
    from rvqmark.core import WatermarkConfig, identity_maps
    from rvqmark.detect import count_green
    from rvqmark.simgen import SyntheticModel, generate

    vocab = (args.vocab,) * args.channels
    cfg = WatermarkConfig(bytes(range(32)), 0.25, 2.0, 1, tuple(range(args.channels)))
    maps = identity_maps(vocab)
    model = SyntheticModel(vocab, 1.0, 1)

    # warm-up also triggers numba compilation (cached on disk after the first run)
    tr = generate(model, cfg, maps, args.steps, 0)
    count_green(tr.stream, cfg, maps)

    def best_of(fn):
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
        return min(times), out

    t_gen, tr = best_of(lambda: generate(model, cfg, maps, args.steps, 7))
    t_cnt, (g, n) = best_of(lambda: count_green(tr.stream, cfg, maps))
    digest = hashlib.sha256(tr.stream.tokens.tobytes() + g.tobytes() + n.tobytes()).hexdigest()
    json.dump({"numba": kernels.HAS_NUMBA, "generate": t_gen, "count": t_cnt, "digest": digest}, sys.stdout)


def run_backend(disable, argv):
    env = dict(os.environ, RVQMARK_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run([sys.executable, __file__, "--child", *argv], env=env, capture_output=True,
                          text=True, check=True)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--vocab", type=int, default=2048)
    ap.add_argument("--channels", type=int, default=4)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        return child(args)

    argv = [f"--repeat={args.repeat}", f"--steps={args.steps}", f"--vocab={args.vocab}",
            f"--channels={args.channels}"]
    fast = run_backend(False, argv)
    slow = run_backend(True, argv)
    print(f"N={args.steps} steps, C={args.channels} channels, |V|={args.vocab}, best of {args.repeat}")
    print(f"{'kernel':<10}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for key in ("generate", "count"):
        print(f"{key:<10}{fast[key] * 1e3:>12.2f}{slow[key] * 1e3:>12.2f}{slow[key] / fast[key]:>9.1f}x")
    if not fast["numba"]:
        print("numba is not installed; both columns ran the numpy path")
    same = fast["digest"] == slow["digest"]
    print("outputs identical:", same)
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
