"""Train the B1-B5 presets on one needle dataset and record test accuracies.

    python3 scripts/run_baselines.py                       # all five presets
    python3 scripts/run_baselines.py --presets b1_max b3_gap --out results/quick.json

Results go to a JSON file with one entry per preset plus the attention
localization rate for attentive schemes.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from grouppool.config import load_config
from grouppool.data import generate
from grouppool.experiment import localization, run_scheme

ROOT = Path(__file__).resolve().parents[1]
PRESETS = ["b1_max", "b2_avg", "b3_gap", "b4_hap", "b5_subgroup_gap"]


@dataclass
class BaselineRun:
    presets: list[str] = field(default_factory=lambda: list(PRESETS))
    config_dir: Path = ROOT / "configs"
    out: Path = ROOT / "results" / "baselines.json"
    verbose: bool = False


def run(opts: BaselineRun) -> dict:
    configs = {name: load_config(opts.config_dir / f"{name}.toml") for name in opts.presets}
    datasets = {repr(c.data) for c in configs.values()}
    if len(datasets) != 1:
        sys.exit("presets disagree on the [data] section; they must share one dataset")
    data_cfg = next(iter(configs.values())).data
    train_clips, test_clips = generate(data_cfg)
    print(f"needle data: {len(train_clips)} train / {len(test_clips)} test clips (seed {data_cfg.seed})")

    results = {"data": asdict(data_cfg), "python": platform.python_version(), "runs": {}}
    for name, cfg in configs.items():
        log = (lambda r: print(f"  {name} stage {r.stage} epoch {r.epoch} loss {r.loss:.4f}")) if opts.verbose else None
        res = run_scheme(cfg.model.scheme, cfg.model, cfg.train, train_clips, test_clips, on_epoch=log)
        entry = res.summary()
        if cfg.model.scheme.attentive:
            loc = localization(res.params, cfg.model, test_clips)
            entry["localization_rate"] = loc.rate
            entry["localized_clips"] = loc.n_correct
        results["runs"][name] = entry
        print(f"{name:16s} test {res.test_accuracy:.3f}  train {res.train_accuracy:.3f}  {res.seconds:.0f}s")

    opts.out.parent.mkdir(parents=True, exist_ok=True)
    opts.out.write_text(json.dumps(results, indent=2) + "\n")
    print(f"-> {opts.out}")
    return results


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--presets", nargs="+", choices=PRESETS, default=PRESETS)
    p.add_argument("--config-dir", type=Path, default=BaselineRun.config_dir)
    p.add_argument("--out", type=Path, default=BaselineRun.out)
    p.add_argument("-v", "--verbose", action="store_true")
    a = p.parse_args(argv)
    run(BaselineRun(a.presets, a.config_dir, a.out, a.verbose))


if __name__ == "__main__":
    main()
