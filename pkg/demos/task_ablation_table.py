"""Per-task inclusion correlations from a task-ablation table.

Reads a CSV of task flags and image-level scores (default: the published
18-row table bundled with the tests) and prints, per task, the Spearman
correlation between including that task and the score.

    python3 demos/task_ablation_table.py [ablation.csv]
"""

import sys
from pathlib import Path

from mtnic.metrics import TASK_COLUMNS, read_ablation_csv, task_inclusion_correlation

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "data" / "task_ablation.csv"
rows = read_ablation_csv(path)
print(f"{len(rows)} encoders; best score {max(r.correlation for r in rows):.3f}")
for task, rho in zip(TASK_COLUMNS, task_inclusion_correlation(rows)):
    print(f"  {task:11s} {rho:+.3f}")
