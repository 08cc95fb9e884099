"""Desk-scale efficacy run: pretrain a base model, build X-RAFT, fine-tune, score the test split.

    python scripts/run_efficacy.py --seed 0 --pretrain-steps 1500 --max-batches 400
"""

import argparse
import json
from dataclasses import replace

from xraft.benchmark import EfficacyConfig, run_efficacy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=("rgb", "hsi", "bbb"), default="rgb")
    ap.add_argument("--pretrain-steps", type=int, default=None)
    ap.add_argument("--max-batches", type=int, default=None)
    ap.add_argument("--json", help="write the summary here")
    args = ap.parse_args()

    cfg = EfficacyConfig(seed=args.seed, mode=args.mode)
    if args.pretrain_steps is not None:
        cfg.pretrain = replace(cfg.pretrain, steps=args.pretrain_steps)
    if args.max_batches is not None:
        cfg.train = replace(cfg.train, max_batches=args.max_batches)
    res = run_efficacy(cfg, print)
    summary = {
        "fresh_test_epe": res.initial_epe,
        "tuned_test_epe": res.final_epe,
        "reduction": res.reduction,
        "zero_flow_test_epe": res.zero_epe,
        "identity_mean_flow": res.identity_flow,
        "best_batch": res.finetune.best_batch,
        "batches_run": res.finetune.batches_run,
        "minutes": res.seconds / 60,
    }
    print(json.dumps(summary, indent=2))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
