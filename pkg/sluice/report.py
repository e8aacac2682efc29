from collections import Counter
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import pandas as pd
from structlog import get_logger

from .constants import (
    FRONTIER_FILE,
    HARD_TASKS,
    SUMMARY_FILE,
    TABLE_FILE,
    TIMELINE_FILE,
)

logger = get_logger()

SUMMARY_COLUMNS = [
    "policy",
    "task_id",
    "setting",
    "label",
    "episodes",
    "sr",
    "mean_steps",
    "mean_calls",
    "mean_checks",
    "mean_wam_flops",
    "mean_verifier_flops",
]

MARKERS = {"easy": "o", "hard": "^"}


class Timeline(NamedTuple):
    policy: str
    task_id: str
    seed: int
    steps: list[int]
    scores: list[float]
    replans: list[int]


def difficulty(task_id: str) -> str:
    return "hard" if task_id in HARD_TASKS else "easy"


def summarize(records: Sequence[dict]) -> pd.DataFrame:
    """one row per (policy, task): SR in percent, mean steps, calls and costs"""
    if not records:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    df = pd.DataFrame.from_records(
        [{k: v for k, v in rec.items() if k != "records"} for rec in records]
    )
    df["label"] = df["setting"] + "." + df["task_id"].map(difficulty)
    order = list(dict.fromkeys(df["policy"]))
    df["policy"] = pd.Categorical(df["policy"], categories=order, ordered=True)
    summary = (
        df.groupby(["policy", "task_id", "setting", "label"], observed=True, sort=True)
        .agg(
            episodes=("success", "size"),
            sr=("success", "mean"),
            mean_steps=("steps", "mean"),
            mean_calls=("wam_calls", "mean"),
            mean_checks=("verifier_checks", "mean"),
            mean_wam_flops=("wam_flops", "mean"),
            mean_verifier_flops=("verifier_flops", "mean"),
        )
        .reset_index()
    )
    summary["sr"] = summary["sr"] * 100
    summary["policy"] = summary["policy"].astype(str)
    return summary[SUMMARY_COLUMNS]


def write_summary(summary: pd.DataFrame, path: Path) -> Path:
    summary.to_csv(path, index=False, float_format="%.6f")
    return Path(path)


def render_table(summary: pd.DataFrame) -> str:
    labels = list(dict.fromkeys(summary["label"]))
    header = ["policy"] + [f"{lab} {m}" for lab in labels for m in ("SR", "T", "Calls")]
    rows = []
    for policy, grp in summary.groupby("policy", sort=False):
        cells = [str(policy)]
        for lab in labels:
            hit = grp[grp["label"] == lab]
            if hit.empty:
                cells += ["-"] * 3
                continue
            row = hit.iloc[0]
            cells += [
                f"{row['sr']:.1f}",
                f"{row['mean_steps']:.1f}",
                f"{row['mean_calls']:.2f}",
            ]
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    head = "  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()
    return "\n".join([head, "-" * len(head)] + lines) + "\n"


def frontier_points(summary: pd.DataFrame) -> list[tuple[str, str, float, float]]:
    return [
        (str(r.policy), str(r.label), float(r.sr), float(r.mean_steps))
        for r in summary.itertuples()
    ]


def render_frontier(summary: pd.DataFrame, path: Path) -> Path:
    """SR against mean episode steps, one marker per (policy, task label)"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = frontier_points(summary)
    policies = list(dict.fromkeys(p for p, *_ in points))
    colors = plt.get_cmap("tab10")
    with matplotlib.rc_context({"svg.hashsalt": "sluice", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, policy in enumerate(policies):
            for name, label, sr, steps in points:
                if name != policy:
                    continue
                ax.scatter(
                    steps,
                    sr,
                    color=colors(i % 10),
                    marker=MARKERS[label.rsplit(".", 1)[-1]],
                    label=f"{policy} ({label})",
                )
        ax.set_xlabel("steps")
        ax.set_ylabel("SR(%)")
        ax.set_ylim(-5, 105)
        ax.grid(True, alpha=0.3)
        if points:
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)


def score_timelines(records: Sequence[dict], per_cell: int = 4) -> list[Timeline]:
    """verifier scores along the first verified episodes of each (policy, task)"""
    timelines, seen = [], Counter()
    for rec in records:
        steps = rec["records"]
        checked = [i for i, step in enumerate(steps, 1) if step["e"] is not None]
        cell = (rec["policy"], rec["task_id"])
        if not checked or seen[cell] >= per_cell:
            continue
        seen[cell] += 1
        timelines.append(
            Timeline(
                rec["policy"],
                rec["task_id"],
                rec["seed"],
                checked,
                [steps[i - 1]["e"] for i in checked],
                [i for i, step in enumerate(steps, 1) if step["replan"]],
            )
        )
    return timelines


def render_timeline(
    records: Sequence[dict], path: Path, tau: Optional[float] = None
) -> Path:
    """per-check verifier score against episode step, replans crossed out"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    timelines = score_timelines(records)
    tasks = list(dict.fromkeys(rec["task_id"] for rec in records)) or [""]
    policies = list(dict.fromkeys(tl.policy for tl in timelines))
    colors = plt.get_cmap("tab10")
    with matplotlib.rc_context({"svg.hashsalt": "sluice", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(
            1, len(tasks), figsize=(4 * len(tasks), 3), sharey=True, squeeze=False
        )
        labelled = set()
        for tl in timelines:
            ax = axes[0, tasks.index(tl.task_id)]
            color = colors(policies.index(tl.policy) % 10)
            label = None if tl.policy in labelled else tl.policy
            labelled.add(tl.policy)
            ax.plot(tl.steps, tl.scores, marker=".", lw=1, color=color, label=label)
            crossed = [(t, e) for t, e in zip(tl.steps, tl.scores) if t in tl.replans]
            if crossed:
                xs, ys = zip(*crossed)
                ax.scatter(xs, ys, marker="x", color="black", zorder=3)
        for ax, task in zip(axes[0], tasks):
            if tau is not None:
                ax.axhline(tau, color="grey", ls="--", lw=0.8)
            ax.set_title(task, fontsize=9)
            ax.set_xlabel("step")
            ax.set_ylim(-0.05, 1.05)
            ax.grid(True, alpha=0.3)
        axes[0, 0].set_ylabel("e")
        if timelines:
            axes[0, 0].legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)


def compare_report(
    records: Sequence[dict], out_dir: Path, tau: Optional[float] = None
) -> dict[str, Path]:
    summary = summarize(records)
    out_dir = Path(out_dir)
    table = render_table(summary)
    paths = {
        "summary": write_summary(summary, out_dir / SUMMARY_FILE),
        "frontier": render_frontier(summary, out_dir / FRONTIER_FILE),
        "timeline": render_timeline(records, out_dir / TIMELINE_FILE, tau),
        "table": out_dir / TABLE_FILE,
    }
    paths["table"].write_text(table)
    logger.info("report written", rows=len(summary), out=out_dir.as_posix())
    return paths
