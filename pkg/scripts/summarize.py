"""Print the most and least vulnerable group per category from a results directory.

    python3 scripts/summarize.py results/default
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path


def main(results: str) -> None:
    rows = list(csv.DictReader((Path(results) / "table_b1.csv").open()))
    cells = defaultdict(dict)
    for r in rows:
        if r["flag"]:
            cells[(r["trainer"], r["test_set"], r["metric"], r["category"])][r["flag"]] = (r["group"], float(r["nu"]))
    for (tr, ts, m, cat), flags in sorted(cells.items()):
        most, least = flags.get("most"), flags.get("least")
        print(f"{tr:10s} {ts:10s} {m:4s} {cat:12s} most {most[0]:>9s} ({most[1]:+.3f})  "
              f"least {least[0]:>9s} ({least[1]:+.3f})")
    notices = Path(results) / "notices.txt"
    if notices.exists() and notices.read_text().strip():
        print("\nnotices:\n" + notices.read_text().rstrip())


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results")
