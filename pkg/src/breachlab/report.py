"""Report emission: delimited round data, a JSON summary, and rendered
figures, written side by side under one output directory.

CSV column order (one row per round, grouped by trial):
    trial, round, pre_transfer, post_success, filter_rate, fpr_realized,
    benign_acc, d_benign_med, d_adv_med

Floats are written with 17 significant digits so a parsed CSV reproduces
the numbers exactly. Non-finite values appear as "nan" in the CSV and as
null in JSON.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .experiment import GameResult, RoundResult, compute_nbr

REPORT_SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "trial",
    "round",
    "pre_transfer",
    "post_success",
    "filter_rate",
    "fpr_realized",
    "benign_acc",
    "d_benign_med",
    "d_adv_med",
)

_ROUND_FIELDS = (
    "pre_transfer",
    "post_success",
    "filter_rate",
    "fpr_realized",
    "benign_acc",
    "d_benign_med",
    "d_adv_med",
)


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _jsonable(value: float):
    return None if not math.isfinite(value) else float(value)


def _round_dict(r: RoundResult) -> dict:
    d = {"round": r.breach_index}
    d.update({name: _jsonable(getattr(r, name)) for name in _ROUND_FIELDS})
    return d


def emit_report(
    results: list[GameResult],
    out_dir: str | Path,
    scenario_echo: dict | None = None,
    figures: bool = True,
) -> dict[str, Path]:
    """Write rounds.csv, summary.json and (optionally) figures.

    Returns a name -> path map of everything written. Deterministic
    ordering: trials in input order, rounds by breach index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    csv_path = out_dir / "rounds.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for game in results:
            for r in game.rounds:
                writer.writerow(
                    [game.seed, r.breach_index]
                    + [_fmt(getattr(r, name)) for name in _ROUND_FIELDS]
                )
    paths["csv"] = csv_path

    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": scenario_echo or {},
        "trials": [
            {
                "seed": game.seed,
                "target_fpr": game.target_fpr,
                "nbr": game.nbr,
                "rounds": [_round_dict(r) for r in game.rounds],
            }
            for game in results
        ],
    }
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True, allow_nan=False))
    paths["json"] = json_path

    if figures and results and results[0].rounds:
        paths.update(render_game_figures(results, out_dir))
    return paths


def parse_report_csv(path: str | Path) -> list[dict]:
    """Rows back as dicts with floats; inverse of the emit_report CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_COLUMNS):
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        for row in reader:
            parsed = {"trial": int(row["trial"]), "round": int(row["round"])}
            parsed.update({name: float(row[name]) for name in _ROUND_FIELDS})
            rows.append(parsed)
    return rows


def nbr_from_csv(path: str | Path, cutoff: float) -> dict[int, int]:
    """Recompute per-trial NBR from an emitted CSV (consistency check)."""
    rows = parse_report_csv(path)
    by_trial: dict[int, list[tuple[int, float]]] = {}
    for row in rows:
        by_trial.setdefault(row["trial"], []).append((row["round"], row["post_success"]))
    return {
        trial: compute_nbr([p for _, p in sorted(entries)], cutoff)
        for trial, entries in by_trial.items()
    }


# ---------------------------------------------------------------------------
# figures


def render_game_figures(results: list[GameResult], out_dir: str | Path) -> dict[str, Path]:
    """Per-round rate curves and loss-gap medians, one line per trial."""
    out_dir = Path(out_dir)
    paths = {}

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6), sharex=True)
    for game in results:
        rounds = [r.breach_index for r in game.rounds]
        axes[0].plot(rounds, [r.pre_transfer for r in game.rounds], marker="o", label=f"seed {game.seed}")
        axes[1].plot(rounds, [r.post_success for r in game.rounds], marker="o", label=f"seed {game.seed}")
        axes[2].plot(rounds, [r.filter_rate for r in game.rounds], marker="o", label=f"seed {game.seed}")
    axes[0].set_title("pre-filter transfer rate")
    axes[1].set_title("post-filter targeted success")
    axes[2].set_title("filter success on transfers")
    for ax in axes:
        ax.set_xlabel("breached versions")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[1].axhline(0.2, color="red", ls="--", lw=1, label="recovery cutoff")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "round_rates.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["round_rates"] = path

    fig, ax = plt.subplots(figsize=(6, 4))
    for game in results:
        rounds = [r.breach_index for r in game.rounds]
        ax.plot(rounds, [r.d_adv_med for r in game.rounds], marker="o",
                label=f"adversarial (seed {game.seed})")
        ax.plot(rounds, [r.d_benign_med for r in game.rounds], marker="s", ls="--",
                label=f"benign (seed {game.seed})")
    ax.set_xlabel("breached versions")
    ax.set_ylabel("median max loss gap")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "loss_gap_medians.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["loss_gap_medians"] = path
    return paths


def emit_sweep_report(
    sweeps: dict[float, GameResult],
    out_dir: str | Path,
    x_name: str,
    scenario_echo: dict | None = None,
    figures: bool = True,
) -> dict[str, Path]:
    """Report for fpr or strength sweeps: JSON table plus an NBR curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    table = [
        {
            x_name: x,
            "nbr": game.nbr,
            "median_adv_gap_round1": _jsonable(game.rounds[0].d_adv_med) if game.rounds else None,
            "rounds": [_round_dict(r) for r in game.rounds],
        }
        for x, game in sorted(sweeps.items())
    ]
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "sweep": x_name,
        "scenario": scenario_echo or {},
        "points": table,
    }
    json_path = out_dir / f"{x_name}_sweep.json"
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=False))
    paths["json"] = json_path

    if figures:
        xs = [row[x_name] for row in table]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, [row["nbr"] for row in table], marker="o")
        ax.set_xlabel(x_name)
        ax.set_ylabel("NBR")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig_path = out_dir / f"{x_name}_sweep.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths
