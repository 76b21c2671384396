"""Robustness report: a fixed JSON schema built from an experiment's artifacts.

Every report covers three attack families (gradient-based, gradient-free,
random noise), each present or skipped with a reason, all at one shared
perturbation budget. It names the strongest attack, flags anomalies and
configurations that could give a false sense of security, and echoes the
threat model, config and seeds.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..errors import ReportError
from ..wireless import classification_report

SCHEMA = "phyadv-report/1"
FAMILIES = ("gradient-based", "gradient-free", "random-noise")


def metric_block(pred, truth, n_classes: int) -> dict:
    rep = classification_report(pred, truth, n_classes)
    return {"accuracy": rep["accuracy"], "precision": float(np.mean(rep["precision"])),
            "recall": float(np.mean(rep["recall"])), "f1": rep["macro_f1"],
            "false_positives": rep["false_positives"], "false_negatives": rep["false_negatives"]}


def attack_entry(name: str, family: str, power_ratio: float, metrics: dict, **extra) -> dict:
    if family not in FAMILIES:
        raise ReportError(f"unknown attack family {family!r}")
    return {"name": name, "family": family, "power_ratio": float(power_ratio), "metrics": metrics, **extra}


def _deltas(metrics: dict, clean: dict) -> dict:
    out = {"accuracy_delta": metrics["accuracy"] - clean["accuracy"]}
    for key in ("precision", "recall", "f1"):
        if metrics.get(key) is not None and clean.get(key) is not None:
            out[f"{key}_delta"] = metrics[key] - clean[key]
    for key in ("false_positives", "false_negatives"):
        if metrics.get(key) is not None and clean.get(key) is not None:
            per_class = [int(a) - int(b) for a, b in zip(metrics[key], clean[key])]
            out[f"{key}_delta"] = per_class
            out[f"{key}_delta_total"] = int(sum(per_class))
    return out


def build_report(results: dict, threat_model: dict, config: dict, transfer: dict | None = None,
                 ood: dict | None = None, tie_tolerance: float = 1e-12) -> dict:
    """Assemble the report from family results.

    ``results`` holds ``budget_power_ratio``, ``clean`` metrics, a list of
    ``attacks`` (see ``attack_entry``) and ``skipped``: family -> reason.
    Raises ``ReportError`` if any attack ran at a different budget.
    """
    if not threat_model:
        raise ReportError("no threat model: the report cannot be generated")
    budget = float(results["budget_power_ratio"])
    attacks = results.get("attacks", [])
    skipped = dict(results.get("skipped", {}))
    for a in attacks:
        if not math.isclose(a["power_ratio"], budget, rel_tol=1e-9, abs_tol=0.0):
            raise ReportError(f"attack {a['name']} ran at power ratio {a['power_ratio']} but the report budget "
                              f"is {budget}; comparisons need matched perturbation energy")
    families = {}
    for fam in FAMILIES:
        members = [a for a in attacks if a["family"] == fam]
        if members:
            families[fam] = {"status": "run", "attacks": [a["name"] for a in members]}
        elif fam in skipped:
            families[fam] = {"status": "skipped", "reason": skipped[fam]}
        else:
            raise ReportError(f"attack family {fam} neither run nor marked skipped")
    clean = results["clean"]
    table = [{"attack": a["name"], "family": a["family"], **a["metrics"], **_deltas(a["metrics"], clean)}
             for a in attacks]

    strongest = None
    if attacks:
        fam_acc = {fam: min(a["metrics"]["accuracy"] for a in attacks if a["family"] == fam)
                   for fam in FAMILIES if families[fam]["status"] == "run"}
        low = min(fam_acc.values())
        tied = sorted(f for f, v in fam_acc.items() if v - low <= tie_tolerance)
        best_attacks = sorted(a["name"] for a in attacks
                              if a["family"] in tied and a["metrics"]["accuracy"] - low <= tie_tolerance)
        strongest = {"families": tied, "attacks": best_attacks, "accuracy": low, "tie": len(tied) > 1,
                     "family_accuracy": fam_acc}

    anomalies, warnings = [], []
    if strongest and "gradient-based" in strongest["family_accuracy"]:
        grad = strongest["family_accuracy"]["gradient-based"]
        noise = strongest["family_accuracy"].get("random-noise")
        if noise is not None and noise < grad - tie_tolerance:
            anomalies.append({"rule": "random noise beats gradient-based attack at matched energy",
                              "random_noise_accuracy": noise, "gradient_based_accuracy": grad})
        free = strongest["family_accuracy"].get("gradient-free")
        if free is not None and free < grad - tie_tolerance:
            warnings.append("gradient-free attack beats the gradient-based one: gradients may be masked, "
                            "so gradient-based results can create a false sense of security")
    if families["gradient-based"]["status"] != "run":
        warnings.append("no gradient-based (strongest known) attack was evaluated; results from weaker "
                        "attacks alone can create a false sense of security")
    if not attacks:
        warnings.append("no attack was run")

    matrix = transfer or {"status": "skipped", "reason": "no cross-seed models configured"}
    if matrix.get("status") == "run":
        m = np.asarray(matrix["matrix"], dtype=float)
        off = m[~np.eye(*m.shape, dtype=bool)] if m.shape[0] == m.shape[1] and m.shape[0] > 1 else np.array([])
        if off.size:
            matrix = {**matrix, "diagonal_mean": float(np.mean(np.diag(m))), "off_diagonal_mean": float(off.mean())}

    return {
        "schema": SCHEMA,
        "case_study": config.get("case_study"),
        "threat_model": threat_model,
        "seeds": results.get("seeds", {"base": config.get("seed")}),
        "config": config,
        "budget": {"power_ratio": budget, "matched": True,
                   "note": "jamming and random-noise baselines inject exactly the adversarial energy budget"},
        "clean": clean,
        "families": families,
        "metric_table": table,
        "strongest_attack": strongest,
        "anomalies": anomalies,
        "warnings": warnings,
        "transferability": matrix,
        "ood": ood or {"status": "skipped", "reason": "no out-of-distribution suite for this case study"},
        "adaptive_evaluation": {"status": "not-performed",
                                "reason": "adaptive re-attack strategies are outside the testbed"},
        "summary": results.get("summary", {}),
    }


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def generate_report(artifact_dir) -> dict:
    """Pure function of the artifact directory."""
    root = Path(artifact_dir)
    config = _read_json(root / "config.json")
    results = _read_json(root / "results" / "families.json")
    if config is None or results is None:
        raise ReportError(f"{root} lacks config.json or results/families.json; run the attack stage first")
    return build_report(results, config.get("threat_model"), config, _read_json(root / "results" / "transfer.json"),
                        _read_json(root / "results" / "ood.json"))


def render_text(report: dict) -> str:
    lines = [f"robustness report ({report['schema']}), case study {report['case_study']}",
             f"threat model: {report['threat_model']['knowledge']}; {report['threat_model']['assumptions']}",
             f"budget: power ratio {report['budget']['power_ratio']:g} (matched across families)",
             f"clean accuracy: {report['clean']['accuracy']:.4f}", ""]
    for fam, info in report["families"].items():
        lines.append(f"{fam}: " + (", ".join(info["attacks"]) if info["status"] == "run"
                                   else f"skipped ({info['reason']})"))
    lines.append("")
    lines.append(f"{'attack':<24}{'family':<16}{'accuracy':>10}{'delta':>10}")
    for row in report["metric_table"]:
        lines.append(f"{row['attack']:<24}{row['family']:<16}{row['accuracy']:>10.4f}{row['accuracy_delta']:>10.4f}")
    s = report["strongest_attack"]
    if s:
        lines.append("")
        lines.append(f"strongest: {', '.join(s['attacks'])} (accuracy {s['accuracy']:.4f})"
                     + (" [tie]" if s["tie"] else ""))
    for a in report["anomalies"]:
        lines.append(f"ANOMALY: {a['rule']}")
    for w in report["warnings"]:
        lines.append(f"WARNING: {w}")
    t = report["transferability"]
    lines.append(f"transferability: {t['status']}" + (f" ({t['reason']})" if t["status"] != "run" else ""))
    lines.append(f"adaptive evaluation: {report['adaptive_evaluation']['status']}")
    return "\n".join(lines) + "\n"


def write_report(artifact_dir) -> dict:
    report = generate_report(artifact_dir)
    root = Path(artifact_dir)
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (root / "report.txt").write_text(render_text(report))
    return report
