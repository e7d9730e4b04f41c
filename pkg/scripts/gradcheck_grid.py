"""Finite-difference gradient check over every variant x head x PE x mask combination (float64)."""
import argparse
import itertools
import time

from clops.config import ATTENTION_MASKS, HEADS, POSITIONAL_ENCODINGS, VARIANTS, ModelConfig
from clops.gradcheck import model_gradient_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--L", type=int, default=8)
    ap.add_argument("--H", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tol", type=float, default=1e-4)
    args = ap.parse_args()

    t0, worst, bad = time.time(), 0.0, 0
    for variant, head, pe, mask in itertools.product(VARIANTS, HEADS, POSITIONAL_ENCODINGS, ATTENTION_MASKS):
        cfg = ModelConfig.preset("tiny", variant=variant, head=head, pe=pe, attn_mask=mask, L=args.L, H=args.H,
                                 lags=(1, 2, 24), d_y=2 if head == "mv_student_t" else 1)
        res = model_gradient_check(cfg, seed=args.seed)
        worst = max(worst, res.max_rel_err)
        flag = "ok" if res.max_rel_err <= args.tol and res.max_null_abs <= 1e-9 else "FAIL"
        bad += flag == "FAIL"
        print(f"{variant:16s} {head:13s} {pe:14s} {mask:12s} rel={res.max_rel_err:.2e} "
              f"probed={res.n_probed} null={len(res.null_params)} {flag}")
    print(f"worst relative error {worst:.2e}, {bad} failures, {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
