"""Train and run every experiment for one config, then print the result tables.

    python3 scripts/run_pipeline.py --config configs/smoke.json --out runs/smoke
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from querywatch.harness.cli import main as cli_main  # noqa: E402
from summarize import summarize  # noqa: E402


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/default")
    p.add_argument("--seed", type=int)
    args = p.parse_args()
    argv = ["all", "--out", args.out]
    if args.config:
        argv += ["--config", args.config]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    code = cli_main(argv)
    if code == 0:
        summarize(Path(args.out))
    return code


if __name__ == "__main__":
    sys.exit(main())
