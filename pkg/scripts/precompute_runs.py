"""Populate the acceptance-run cache (train_cache/) ahead of running pytest.

Usage:
    python3 scripts/precompute_runs.py            # run everything not cached
    python3 scripts/precompute_runs.py full_seed0 noise_025   # specific runs
    python3 scripts/precompute_runs.py --list
    python3 scripts/precompute_runs.py --force full_seed0

Runs execute sequentially; each writes checkpoint.bin, metrics.jsonl,
config.yaml and result.json under train_cache/<name>/.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from _acceptance_runs import CACHE_DIR, RUNS, build_config, dataset_signature, execute  # noqa: E402


def is_cached(name: str) -> bool:
    path = CACHE_DIR / name / "result.json"
    if not path.exists():
        return False
    result = json.loads(path.read_text())
    spec = RUNS[name]
    return (result.get("config_hash") == build_config(spec).config_hash()
            and result.get("dataset") == dataset_signature(spec))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("names", nargs="*", help="run names; default: all")
    parser.add_argument("--list", action="store_true", help="list runs and cache status")
    parser.add_argument("--force", action="store_true", help="retrain even if cached")
    args = parser.parse_args()

    if args.list:
        for name in RUNS:
            print(f"{name:20s} {'cached' if is_cached(name) else 'missing'}")
        return 0

    names = args.names or list(RUNS)
    unknown = [n for n in names if n not in RUNS]
    if unknown:
        parser.error(f"unknown runs: {unknown}; choose from {list(RUNS)}")

    failures = []
    for name in names:
        if not args.force and is_cached(name):
            print(f"[skip] {name} already cached", flush=True)
            continue
        print(f"[run ] {name} starting at {time.strftime('%H:%M:%S')}", flush=True)
        try:
            result = execute(RUNS[name])
        except Exception:
            traceback.print_exc()
            failures.append(name)
            continue
        brief = {k: v for k, v in result.items()
                 if isinstance(v, (int, float)) and k != "elapsed_s"}
        print(f"[done] {name} in {result['elapsed_s']:.0f}s: {brief}", flush=True)
    if failures:
        print(f"[fail] {failures}", flush=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
