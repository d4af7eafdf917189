"""Consolidate run directories into tables laid out like the published results (markdown + JSON)."""

from __future__ import annotations

import json
from pathlib import Path

ABSENT = "absent"

PUBLISHED_TABLE1 = {"attack_success": "~50% ± 4%", "pgd_success": "10.4% (eps=0.3)"}
PUBLISHED_TABLE2 = {
    (0.6, 0.8, 12): "~70% ± 4%",
    (0.5, 0.8, 12): "~69% ± 3%",
    (0.3, 0.8, 12): "~67% ± 5%",
    (0.1, 0.8, 12): "~60% ± 4%",
    (0.0, 1.0, 12): "~50% ± 4%",
    (0.6, 0.8, 29): "~70% ± 3%",
    (0.5, 0.8, 29): "~68% ± 3%",
    (0.3, 0.8, 29): "~67% ± 3%",
    (0.1, 0.8, 29): "~58% ± 4%",
    (0.0, 1.0, 29): "~60% ± 3%",
}
PUBLISHED_TABLE3 = {"standard": "98.7%", "robust": "98.4%", "inference": "97.5%"}


def _pct(rate) -> str:
    if rate is None:
        return ABSENT
    if isinstance(rate, dict):
        lo, hi = rate["ci95"]
        return f"{100 * rate['value']:.1f}% [{100 * lo:.1f}, {100 * hi:.1f}]"
    return f"{100 * rate:.1f}%"


def load_runs(dirs) -> list[dict]:
    runs = []
    for d in dirs:
        d = Path(d)
        candidates = [d] if (d / "manifest.json").exists() else sorted(p.parent for p in d.glob("*/manifest.json"))
        for run in candidates:
            manifest = json.loads((run / "manifest.json").read_text())
            summary_path = run / "summary.json"
            if not summary_path.exists():
                continue
            runs.append({"dir": str(run), "manifest": manifest, "summary": json.loads(summary_path.read_text())})
    return runs


def build_tables(runs: list[dict]) -> dict:
    by_cmd: dict[str, list[dict]] = {}
    for r in runs:
        by_cmd.setdefault(r["manifest"]["subcommand"], []).append(r)

    table1 = []
    for r in by_cmd.get("evaluate", []):
        s = r["summary"]
        pgd = next(
            (
                b["summary"]["results"]
                for b in by_cmd.get("baseline-pgd", [])
                if b["summary"].get("classifier_role") == "robust"
            ),
            None,
        )
        pgd_03 = next((p for p in (pgd or []) if abs(p["epsilon"] - 0.3) < 1e-9), None)
        table1.append({
            "dataset": "MNIST",
            "architecture": "Madry Network",
            "attack_success_published": PUBLISHED_TABLE1["attack_success"],
            "attack_success_measured": _pct(s["success_rate"]),
            "pgd_success_published": PUBLISHED_TABLE1["pgd_success"],
            "pgd_success_measured": _pct(1 - pgd_03["robust_acc"]) if pgd_03 else ABSENT,
            "mean_ssim": round(s["mean_ssim"], 3),
            "mean_ssim_recon": round(s["mean_ssim_recon"], 3),
            "run": r["dir"],
        })

    table2 = []
    for r in by_cmd.get("ablate", []):
        for row in r["summary"]["rows"]:
            key = (round(row["alpha"], 3), round(row["beta"], 3), round(row["budget"] / 1000))
            table2.append({
                "alpha": row["alpha"],
                "beta": row["beta"],
                "trainable_params": row["param_count"],
                "accuracy_published": PUBLISHED_TABLE2.get(key, ABSENT),
                "accuracy_measured": _pct(row["accuracy"]),
                "run": r["dir"],
            })

    table3 = {
        "test_standard_published": PUBLISHED_TABLE3["standard"],
        "test_standard_measured": ABSENT,
        "test_robust_published": PUBLISHED_TABLE3["robust"],
        "test_robust_measured": ABSENT,
        "inference_published": PUBLISHED_TABLE3["inference"],
        "inference_measured": ABSENT,
    }
    for r in by_cmd.get("train-robust", []):
        s = r["summary"]
        table3["test_standard_measured"] = _pct(s["standard_acc"])
        if "robust_acc" in s:
            table3["test_robust_measured"] = f"{_pct(s['robust_acc'])} (eps={s['epsilon']}, {s['steps']} steps)"
    for r in by_cmd.get("train-inference", []):
        table3["inference_measured"] = _pct(r["summary"]["standard_acc"])

    sanity = [
        {"epsilon": p["epsilon"], "steps": p["steps"], "accuracy": p["robust_acc"], "run": b["dir"]}
        for b in by_cmd.get("baseline-pgd", [])
        if b["summary"].get("classifier_role") == "undefended"
        for p in b["summary"]["results"]
    ]
    return {"table1": table1, "table2": table2, "table3": [table3], "undefended_pgd": sanity}


def _md_table(rows: list[dict], columns: list[str]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        lines.append("| " + " | ".join(str(row.get(c, ABSENT)) for c in columns) + " |")
    return "\n".join(lines)


def render_markdown(tables: dict) -> str:
    parts = [
        "# Results (MNIST, desk scale)",
        "",
        "## Table 1: attack success against the robust classifier",
        "",
        _md_table(tables["table1"], ["dataset", "architecture", "attack_success_published", "attack_success_measured",
                                     "pgd_success_published", "pgd_success_measured", "mean_ssim", "mean_ssim_recon"]),
        "",
        "## Table 2: ablation over (alpha, beta) and parameter budget",
        "",
        _md_table(tables["table2"], ["alpha", "beta", "trainable_params", "accuracy_published", "accuracy_measured"]),
        "",
        "## Table 3: classifier accuracies",
        "",
        _md_table(tables["table3"], ["test_standard_published", "test_standard_measured", "test_robust_published",
                                     "test_robust_measured", "inference_published", "inference_measured"]),
        "",
        "## PGD against an undefended classifier",
        "",
        _md_table(tables["undefended_pgd"], ["epsilon", "steps", "accuracy"]),
        "",
    ]
    return "\n".join(parts)
