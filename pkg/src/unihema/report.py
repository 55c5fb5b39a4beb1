"""Evaluation driver and report rendering.

One eval run produces a JSON report, a per-class CSV, optional
precision-recall points, and matplotlib figures rendered next to them.
Per-image forward passes fan out over a thread pool capped by the
UNIHEMA_THREADS environment variable.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataset import Dataset
from .errors import UsageError
from .metrics import CONVENTIONS, bleu4, dice, exact_match, f1_macro, map50, pr_curves
from .model import UniHemaModel
from .synth import CLASS_NAMES
from .training import sample_from_record


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    per_class: dict
    sample_count: int
    config_digest: str
    notes: list = field(default_factory=lambda: list(CONVENTIONS))

    def to_dict(self) -> dict:
        return {"task": self.task, "metric": self.metric, "value": self.value,
                "per_class": self.per_class, "sample_count": self.sample_count,
                "config_digest": self.config_digest, "notes": self.notes}


def worker_count() -> int:
    cap = os.environ.get("UNIHEMA_THREADS")
    if cap is not None:
        try:
            return max(1, int(cap))
        except ValueError:
            raise UsageError(f"UNIHEMA_THREADS must be an integer, got {cap!r}") from None
    return min(4, os.cpu_count() or 1)


def _parallel(fn, items):
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_evaluation(model: UniHemaModel, dataset: Dataset, task: str, split: str = "eval"):
    """Score one task on a split; returns (reports, extras) where extras may
    carry PR curve points for plotting."""
    records = dataset.records(task, split)
    digest = model.cfg.digest()
    samples = [sample_from_record(dataset, r) for r in records]
    extras: dict = {}

    if task == "det":
        def per_image(sample):
            dets = model.predict_detections(sample["image"], sample["prompt"],
                                            score_threshold=None)
            return [(d.box, d.class_id, d.score) for d in dets]

        preds = _parallel(per_image, samples)
        gts = [(s["boxes"], s["classes"]) for s in samples]
        value, per_class = map50(preds, gts)
        extras["pr"] = pr_curves(preds, gts)
        named = {CLASS_NAMES[c]: ap for c, ap in per_class.items()}
        return [EvalReport(task, "mAP50", value, named, len(samples), digest)], extras

    if task == "seg":
        def per_image(sample):
            mask = model.predict_mask(sample["image"], sample["prompt"])
            return dice(mask, sample["mask"])

        scores = _parallel(per_image, samples)
        by_disease: dict = {}
        for rec, s in zip(records, scores):
            by_disease.setdefault(rec.disease, []).append(s)
        per_class = {d: float(np.mean(v)) for d, v in sorted(by_disease.items())}
        value = float(np.mean(scores))
        return [EvalReport(task, "dice", value, per_class, len(samples), digest)], extras

    if task == "cls":
        pred = _parallel(lambda s: model.predict_class(s["image"])[0], samples)
        gt = [s["class_id"] for s in samples]
        value, per_class = f1_macro(pred, gt, range(len(CLASS_NAMES)))
        named = {CLASS_NAMES[c]: f for c, f in per_class.items()}
        accuracy = float(np.mean(np.asarray(pred) == np.asarray(gt)))
        reports = [EvalReport(task, "f1_macro", value, named, len(samples), digest),
                   EvalReport(task, "accuracy", accuracy, {}, len(samples), digest)]
        return reports, extras

    if task in ("vqa", "mlm"):
        target_key = "answer" if task == "vqa" else "sentence"
        outputs = _parallel(lambda s: model.generate_text(s["image"], s["prompt"])[0], samples)
        references = [s[target_key] for s in samples]
        bleu_scores = [bleu4(c.split(), r.split()) for c, r in zip(outputs, references)]
        reports = [EvalReport(task, "bleu4", float(np.mean(bleu_scores)), {},
                              len(samples), digest)]
        if task == "vqa":
            em = [exact_match(c, r) for c, r in zip(outputs, references)]
            reports.append(EvalReport(task, "exact_match", float(np.mean(em)), {},
                                      len(samples), digest))
        extras["examples"] = list(zip(outputs, references))[:8]
        return reports, extras

    raise UsageError(f"unknown eval task: {task}")


# -- writers -----------------------------------------------------------------

def write_report_json(path, reports) -> None:
    payload = {
        "task": reports[0].task,
        "config_digest": reports[0].config_digest,
        "sample_count": reports[0].sample_count,
        "conventions": list(CONVENTIONS),
        "metrics": [r.to_dict() for r in reports],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "class", "value"])
        for rep in reports:
            writer.writerow([rep.metric, "", f"{rep.value:.6f}"])
            for name, val in rep.per_class.items():
                writer.writerow([rep.metric, name, f"{val:.6f}"])


def write_pr_points(path, pr: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "recall", "precision"])
        for cls, (recall, precision) in sorted(pr.items()):
            name = CLASS_NAMES[cls] if cls < len(CLASS_NAMES) else str(cls)
            for r, p in zip(recall, precision):
                writer.writerow([name, f"{r:.6f}", f"{p:.6f}"])


def render_figures(out_dir, reports, extras) -> list:
    """Render report figures as PNG files; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    task = reports[0].task

    if "pr" in extras and extras["pr"]:
        fig, ax = plt.subplots(figsize=(5, 4))
        for cls, (recall, precision) in sorted(extras["pr"].items()):
            name = CLASS_NAMES[cls] if cls < len(CLASS_NAMES) else str(cls)
            ax.plot(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]),
                    drawstyle="steps-post", label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=8)
        ax.set_title("precision-recall at IoU 0.5")
        path = out_dir / f"{task}_pr_curves.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    for rep in reports:
        if not rep.per_class:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        names = list(rep.per_class)
        values = [rep.per_class[n] for n in names]
        ax.bar(range(len(names)), values, color="#4878a8")
        ax.axhline(rep.value, color="#a84848", linestyle="--", linewidth=1,
                   label=f"mean {rep.value:.3f}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(rep.metric)
        ax.legend(fontsize=8)
        path = out_dir / f"{task}_{rep.metric}_per_class.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def render_loss_curve(log_csv, out_png) -> bool:
    """Plot the per-task training loss from a stage log CSV."""
    rows = []
    with open(log_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["step"]), row["task"], float(row["loss"])))
    if not rows:
        return False
    tasks = sorted({t for _, t, _ in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for task in tasks:
        pts = [(s, l) for s, t, l in rows if t == task]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=task, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.savefig(out_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return True
