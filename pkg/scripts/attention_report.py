"""Summarise exported attention traces: key-agent vs distractor weight per clip.

    grouppool inspect --config configs/b3_gap.toml
    python3 scripts/attention_report.py runs/b3_gap/traces.jsonl data/needle/test.jsonl
"""
from __future__ import annotations

import argparse
from collections import defaultdict

import numpy as np

from grouppool.data import load_clips, load_traces
from grouppool.experiment import key_weight_ratio


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("traces")
    p.add_argument("clips")
    p.add_argument("--threshold", type=float, default=2.0)
    a = p.parse_args(argv)

    clips = {c.id: c for c in load_clips(a.clips)}
    per_clip = defaultdict(list)
    for rec in load_traces(a.traces):
        per_clip[rec.clip_id].append(rec)

    ratios, n_wrong = [], 0
    for clip_id, recs in sorted(per_clip.items()):
        recs.sort(key=lambda r: r.t)
        if recs[0].pred != recs[0].truth:
            n_wrong += 1
            continue
        weights = np.array([r.alphas for r in recs])
        ratios.append(key_weight_ratio(weights, clips[clip_id].key_agents))

    ratios = np.array(ratios)
    print(f"clips: {len(per_clip)}  correct: {len(ratios)}  wrong: {n_wrong}")
    if len(ratios):
        print(f"key/distractor weight ratio: median {np.median(ratios):.2f}  "
              f"10th pct {np.percentile(ratios, 10):.2f}")
        print(f"ratio > {a.threshold:g} in {np.mean(ratios > a.threshold):.1%} of correct clips")


if __name__ == "__main__":
    main()
