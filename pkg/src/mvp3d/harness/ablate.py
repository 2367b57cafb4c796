"""Config-grid ablations: train each cell on a fixed dataset and tabulate metrics."""

from __future__ import annotations

import csv
import itertools
import math
from pathlib import Path

from ..metrics import format_value
from .config import RunConfig
from .evaluate import evaluate
from .train import Trainer

GRID_KEYS = ("pos_encoding", "query_mode", "K", "L")
METRIC_COLUMNS = ("AP@25", "AP@50", "AP@100", "AP@150", "AP@250", "Recall@500", "MPJPE", "PCP")


class BudgetError(ValueError):
    pass


def grid_cells(grid: dict) -> list[dict]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)}; allowed {GRID_KEYS}")
    keys = [k for k in GRID_KEYS if k in grid]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def run_cell(base: RunConfig, cell: dict, scenes, output_dir=None) -> dict:
    run = base.with_overrides({f"model.{k}": v for k, v in cell.items()})
    trainer = Trainer(run, scenes, output_dir=output_dir, persist=output_dir is not None)
    trainer.train()
    rows, _ = evaluate(trainer.net, scenes, thresholds=(25, 50, 100, 150, 250, 500),
                       confidence_threshold=run.confidence_threshold)
    table = {f"{m}@{t:g}" if m in ("AP", "Recall") else m: v for m, t, v in rows}
    out = dict(cell)
    out["steps"] = trainer.state.step
    out["final_loss"] = trainer.state.losses[-1] if trainer.state.losses else math.nan
    for c in METRIC_COLUMNS:
        out[c] = table.get(c, math.nan)
    return out


def ablate(base: RunConfig, grid: dict, scenes, out_csv, max_cells: int = 16, output_dir=None,
           progress=None) -> list[dict]:
    """Train every cell of ``grid`` and write one CSV row per cell."""
    cells = grid_cells(grid)
    if len(cells) > max_cells:
        raise BudgetError(f"grid has {len(cells)} cells, budget allows {max_cells}")
    results = []
    for i, cell in enumerate(cells):
        sub = None if output_dir is None else Path(output_dir) / f"cell{i:02d}"
        results.append(run_cell(base, cell, scenes, sub))
        if progress is not None:
            progress(i, cell, results[-1])
    write_ablation_csv(results, out_csv)
    return results


def write_ablation_csv(results: list[dict], path) -> None:
    if not results:
        raise ValueError("no ablation results to write")
    cols = [k for k in GRID_KEYS if k in results[0]] + ["steps", "final_loss", *METRIC_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in results:
            w.writerow([format_value(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
