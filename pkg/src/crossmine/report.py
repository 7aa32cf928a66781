"""Run-log reporting: delimited tables plus rendered figures.

Everything derives deterministically from runlog.jsonl (plus the dataset
when available for pseudo-label precision), so re-running a report is
byte-identical.  Percentages follow the run's accounting: user-fetched
and pseudo-labeled counts are reported relative to the pre-given
annotations.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .engine import RunLog
from .geometry import BoundingBox, iou
from .synthbench import Dataset, load_dataset

PNG_METADATA = {"Software": "crossmine"}


class IncompleteRunError(ValueError):
    """The run directory is missing required artifacts."""


def _load_config(run_dir: Path) -> dict:
    path = run_dir / "config.json"
    if not path.exists():
        raise IncompleteRunError(f"{run_dir} has no config.json")
    return json.loads(path.read_text(encoding="utf-8"))


def _round_series(log: RunLog):
    """Per-round annotated%, pseudo%, and mAP derived from the event stream."""
    initial = None
    for event in log.events:
        if event["event"] == "run-start":
            initial = event["initial_annotations"]
            break
    if initial is None:
        raise IncompleteRunError("runlog has no run-start event")
    rows = []
    annotated = 0
    pseudo_ids: set[str] = set()
    by_round: dict[int, dict] = {}
    for event in log.events:
        round_index = event["round"]
        if event["event"] == "annotation-results":
            annotated = event["annotations_used"]
        elif event["event"] == "pseudo-assigned":
            pseudo_ids.update(entry["proposal_id"] for entry in event["labels"])
        elif event["event"] == "evaluation":
            by_round[round_index] = {
                "round": round_index,
                "annotated": annotated,
                "pseudo": len(pseudo_ids),
                "map": event["map"],
            }
    for round_index in sorted(by_round):
        row = by_round[round_index]
        row["annotated_pct"] = 100.0 * row["annotated"] / initial
        row["pseudo_pct"] = 100.0 * row["pseudo"] / initial
        rows.append(row)
    return initial, rows


def pseudo_label_assignments(log: RunLog) -> dict[str, dict]:
    """First positive pseudo-label per distinct proposal, in assignment order."""
    seen: dict[str, dict] = {}
    for event in log.events:
        if event["event"] != "pseudo-assigned":
            continue
        for entry in event["labels"]:
            if entry["category"] >= 0 and entry["proposal_id"] not in seen:
                seen[entry["proposal_id"]] = entry
    return seen


def pseudo_precision_rows(log: RunLog, dataset: Dataset):
    """Per-round positive pseudo-label precision against hidden ground truth."""
    per_round: dict[int, list[bool]] = {}
    seen: set[str] = set()
    for event in log.events:
        if event["event"] != "pseudo-assigned":
            continue
        for entry in event["labels"]:
            if entry["category"] < 0 or entry["proposal_id"] in seen:
                continue
            seen.add(entry["proposal_id"])
            image = dataset.image(entry["image_id"])
            box = BoundingBox(*entry["box"])
            correct = any(
                obj.category == entry["category"] and iou(box, obj.box) >= 0.5
                for obj in image.objects
            )
            per_round.setdefault(event["round"], []).append(correct)
    rows = []
    for round_index in sorted(per_round):
        marks = per_round[round_index]
        rows.append(
            {
                "round": round_index,
                "assigned": len(marks),
                "correct": sum(marks),
                "precision": sum(marks) / len(marks),
            }
        )
    return rows


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _line_figure(path: Path, x, y, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(x, y, marker="o", lw=1.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)


def generate_report(run_dir) -> dict:
    """Write report tables and figures into <run_dir>/report; returns a summary."""
    run_dir = Path(run_dir)
    log_path = run_dir / "runlog.jsonl"
    if not log_path.exists():
        raise IncompleteRunError(f"{run_dir} has no runlog.jsonl")
    log = RunLog.load(log_path)
    config = _load_config(run_dir)
    initial, rows = _round_series(log)

    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    _write_csv(
        out / "summary.csv",
        ["round", "annotated", "annotated_pct", "pseudo", "pseudo_pct", "map"],
        [
            [r["round"], r["annotated"], r["annotated_pct"], r["pseudo"],
             r["pseudo_pct"], r["map"]]
            for r in rows
        ],
    )
    if rows:
        _line_figure(
            out / "map_vs_annotated.png",
            [r["annotated_pct"] for r in rows],
            [r["map"] for r in rows],
            "annotated %", "mAP", "mAP vs fetched annotations",
        )
        _line_figure(
            out / "pseudo_per_round.png",
            [r["round"] for r in rows],
            [r["pseudo_pct"] for r in rows],
            "round", "pseudo %", "pseudo-labeled proposals per round",
        )

    precision_rows = []
    data_dir = config.get("data_dir")
    if data_dir and Path(data_dir).exists():
        dataset = load_dataset(data_dir)
        precision_rows = pseudo_precision_rows(log, dataset)
        _write_csv(
            out / "pseudo_precision.csv",
            ["round", "assigned", "correct", "precision"],
            [[r["round"], r["assigned"], r["correct"], r["precision"]]
             for r in precision_rows],
        )
        if precision_rows:
            _line_figure(
                out / "pseudo_precision.png",
                [r["round"] for r in precision_rows],
                [r["precision"] for r in precision_rows],
                "round", "precision", "positive pseudo-label precision",
            )
    return {
        "initial_annotations": initial,
        "rounds": len(rows),
        "final_map": rows[-1]["map"] if rows else None,
        "annotated_pct": rows[-1]["annotated_pct"] if rows else 0.0,
        "pseudo_pct": rows[-1]["pseudo_pct"] if rows else 0.0,
        "pseudo_precision": precision_rows[-1]["precision"] if precision_rows else None,
    }
