"""Report writers: delimited tables, human-readable text, and figures.

Every report path emits the machine-readable CSV next to a rendered PNG of
the same data. Files contain no wall-clock timestamps, so a deterministic
rerun reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

METRIC_NAMES = ("rmse", "mae", "mape")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def metric_rows(variant: str, per_seed: dict, summary: dict, horizons) -> list[dict]:
    rows = []
    for seed, res in sorted(per_seed.items()):
        rows.append({"variant": variant, "seed": seed, "scope": "overall", **res["overall"]})
        for h in horizons:
            rows.append({"variant": variant, "seed": seed, "scope": f"h{h}", **res["horizon"][h]})
    for stat in ("mean", "std"):
        rows.append(
            {
                "variant": variant,
                "seed": stat,
                "scope": "overall",
                **{m: summary["overall"][m][stat] for m in METRIC_NAMES},
            }
        )
        for h in horizons:
            rows.append(
                {
                    "variant": variant,
                    "seed": stat,
                    "scope": f"h{h}",
                    **{m: summary["horizon"][h][m][stat] for m in METRIC_NAMES},
                }
            )
    return rows


def write_metric_report(
    out_dir: str | Path, reports: list, metadata: dict
) -> tuple[Path, Path]:
    """Write report.csv + report.txt (+ report.json metadata) for MetricReports."""
    out_dir = Path(out_dir)
    rows: list[dict] = []
    for rep in reports:
        rows.extend(metric_rows(rep.variant, rep.per_seed, rep.summary, rep.horizons))
    columns = ["variant", "seed", "scope", *METRIC_NAMES]
    csv_path = out_dir / "report.csv"
    write_csv(csv_path, rows, columns)

    txt_path = out_dir / "report.txt"
    lines = ["forecast evaluation report", "=" * 60]
    for key in sorted(metadata):
        lines.append(f"{key}: {metadata[key]}")
    for rep in reports:
        lines.append("")
        lines.append(f"variant: {rep.variant} (seeds {list(rep.per_seed)})")
        o = rep.summary["overall"]
        lines.append(
            "  overall  "
            + "  ".join(f"{m}={o[m]['mean']:.4f}±{o[m]['std']:.4f}" for m in METRIC_NAMES)
        )
        for h in rep.horizons:
            s = rep.summary["horizon"][h]
            lines.append(
                f"  step {h:>2}  "
                + "  ".join(f"{m}={s[m]['mean']:.4f}±{s[m]['std']:.4f}" for m in METRIC_NAMES)
            )
    txt_path.parent.mkdir(parents=True, exist_ok=True)
    txt_path.write_text("\n".join(lines) + "\n")
    write_json(out_dir / "report.json", {"metadata": metadata, "rows": rows})
    return csv_path, txt_path


def render_pretrain_curve(out_dir: str | Path, val_mse: list[float]) -> Path:
    out_dir = Path(out_dir)
    write_csv(
        out_dir / "pretrain_history.csv",
        [{"epoch": i, "val_mse": v} for i, v in enumerate(val_mse)],
        ["epoch", "val_mse"],
    )
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(val_mse)), val_mse, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation masked MSE")
    ax.set_title("masked-reconstruction pre-training")
    fig.tight_layout()
    path = out_dir / "figures" / "pretrain_curve.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_variant_comparison(out_dir: str | Path, reports: list) -> Path | None:
    if len(reports) < 2:
        return None
    out_dir = Path(out_dir)
    names = [r.variant for r in reports]
    means = [r.summary["overall"]["rmse"]["mean"] for r in reports]
    stds = [r.summary["overall"]["rmse"]["std"] for r in reports]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(names, means, yerr=stds, capsize=4, color="#4878cf")
    ax.set_ylabel("test RMSE (mean over seeds)")
    ax.set_title("variant comparison")
    fig.tight_layout()
    path = out_dir / "figures" / "variant_rmse.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_k_sweep(out_dir: str | Path, rows: list[dict]) -> Path:
    """rows: {k, silhouette, rmse} per sweep point."""
    out_dir = Path(out_dir)
    write_csv(out_dir / "sweep_k.csv", rows, ["k", "silhouette", "rmse"])
    ks = [r["k"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.plot(ks, [r["silhouette"] for r in rows], "o-", color="#4878cf", label="silhouette")
    ax1.set_xlabel("K")
    ax1.set_ylabel("silhouette", color="#4878cf")
    ax2 = ax1.twinx()
    ax2.plot(ks, [r["rmse"] for r in rows], "s--", color="#d65f5f", label="RMSE")
    ax2.set_ylabel("1-step RMSE", color="#d65f5f")
    fig.tight_layout()
    path = out_dir / "figures" / "sweep_k.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
