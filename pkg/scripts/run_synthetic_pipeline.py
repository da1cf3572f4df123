#!/usr/bin/env python3
"""Run synth -> pretrain -> finetune -> score -> eval in one process and print a summary.

    python3 scripts/run_synthetic_pipeline.py --out runs/synthetic [--config configs/default.ini] [--seed 0]
"""
import argparse
import logging
import time

from fusvdd.config import load_config
from fusvdd.pipeline import run_eval, run_finetune, run_pretrain, run_score, run_synth


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch log lines")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = load_config(args.config, args.out, args.seed)
    timings = {}
    t0 = time.perf_counter()
    run_synth(cfg)
    timings["synth"] = time.perf_counter() - t0
    _, cae = run_pretrain(cfg)
    timings["pretrain"] = time.perf_counter() - t0 - sum(timings.values())
    _, ft = run_finetune(cfg)
    timings["finetune"] = time.perf_counter() - t0 - sum(timings.values())
    run_score(cfg)
    report = run_eval(cfg)
    timings["score+eval"] = time.perf_counter() - t0 - sum(timings.values())

    print(f"output: {cfg.paths.resolve('output_dir')}")
    print(f"CAE loss        {cae[0]:.4f} -> {cae[-1]:.4f}  (ratio {cae[-1] / cae[0]:.3f}, {len(cae)} epochs)")
    print(f"central term    {ft[0].central:.4f} -> {ft[-1].central:.4f}  "
          f"(ratio {ft[-1].central / ft[0].central:.3f}, {len(ft)} epochs)")
    print(f"pooled AUC      {report.overall:.4f}")
    print(f"video-avg AUC   {report.average:.4f}  ({len(report.per_video) - len(report.undefined_videos)} videos)")
    print("seconds         " + "  ".join(f"{k} {v:.0f}" for k, v in timings.items()))


if __name__ == "__main__":
    main()
