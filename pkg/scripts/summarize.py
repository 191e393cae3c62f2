"""Print the CSV/JSON reports of a finished run as aligned tables.

    python3 scripts/summarize.py runs/default
"""

import json
import sys
from pathlib import Path

from querywatch.harness.experiments import read_csv

TABLES = ("alarm_matrix.csv", "stream_summary.csv", "defense.csv", "dilution.csv", "evasion_report.csv")


def _fmt(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4g}"


def print_table(path: Path) -> None:
    rows = read_csv(path)
    if not rows:
        return
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print(f"\n{path.name}")
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def summarize(out: Path) -> None:
    report = out / "train_report.json"
    if report.exists():
        print("train_report.json")
        for k, v in json.loads(report.read_text()).items():
            print(f"  {k}: {v}")
    for name in TABLES:
        if (out / name).exists():
            print_table(out / name)


if __name__ == "__main__":
    summarize(Path(sys.argv[1] if len(sys.argv) > 1 else "runs/default"))
