"""Pre-train the tiny masked encoder on synthetic series and compare zero-shot sMAPE with the naive baseline."""
import argparse
import json
import time

from clops.config import EvalPlan, ModelConfig, TrainConfig
from clops.etl import apply_split, check_leakage, make_split
from clops.evaluation import rolling_evaluate
from clops.synthetic import gen_synthetic
from clops.training import pretrain, zero_shot


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pretrain-series", type=int, default=1000)
    ap.add_argument("--heldout-series", type=int, default=100)
    ap.add_argument("--length", type=int, default=2000)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    n = args.pretrain_series + args.heldout_series
    series = gen_synthetic(n, args.length, seed=args.seed)
    mc = ModelConfig.preset("tiny")
    plan = EvalPlan(H=mc.H, stride=mc.H, seed=args.seed)
    split = make_split(series, args.heldout_series / n, args.seed, H=plan.test_length, windows=1)
    pre, tt = apply_split(series, split)
    check_leakage(pre, tt, split)
    tc = TrainConfig.desk(iterations=args.iterations, batch_size=args.batch,
                          warmup_steps=max(1, args.iterations // 10), eval_every=max(1, args.iterations // 4),
                          seed=args.seed)
    t0 = time.time()
    result = pretrain(pre, mc, tc)
    train_s = time.time() - t0
    model = zero_shot(result.model, tt)
    zs = rolling_evaluate(model, tt, plan, L=mc.L)
    naive = rolling_evaluate("naive", tt, plan, L=mc.L, lags=mc.lags)
    print(json.dumps({
        "pretrain_series": len(pre), "heldout_series": len(tt), "train_seconds": round(train_s, 1),
        "val_history": result.val_history, "zero_shot_smape": zs.smape, "naive_smape": naive.smape,
        "relative_improvement": 1 - zs.smape / naive.smape, "zero_shot_crps": zs.crps, "naive_crps": naive.crps,
    }, indent=2))


if __name__ == "__main__":
    main()
