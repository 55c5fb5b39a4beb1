"""Corpus directory layout, manifest, and lazy sample access.

Layout: manifest.json, vocab.txt, images/*.uhtn, annotations/<task>.jsonl.
Images and masks are raw UHTN tensor files; annotations are JSON lines.
Generation is fully deterministic: the same (seed, flags) produce a
byte-identical corpus.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .synth import (CLASS_NAMES, MORPH_NAMES, TASKS, generate_scene, make_prompt,
                    mlm_pair, render, vqa_pair, build_vocabulary)
from .tensor import Tensor, load_uhtn, save_uhtn
from .text import TaskPrompt, Vocabulary

MANIFEST_VERSION = 1


@dataclass
class SampleRecord:
    """One training example: image, task tag, prompt, ground truth."""

    id: str
    task: str
    split: str
    image_path: str
    disease: str
    prompt: TaskPrompt
    gt: dict

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "split": self.split,
            "image": self.image_path,
            "disease": self.disease,
            "prompt": self.prompt.text,
            "gt": self.gt,
        }


def _gt_for(task: str, gt: dict, mask_path: str = None) -> dict:
    if task == "det":
        return {"boxes": [[round(float(v), 8) for v in box] for box in gt["boxes"]],
                "classes": [int(c) for c in gt["classes"]],
                "morph": [[int(f) for f in row] for row in gt["morph"]]}
    if task == "seg":
        return {"mask_image": mask_path}
    if task == "cls":
        return {"class": int(gt["class_id"])}
    if task == "vqa":
        return {"answer": gt["answer"]}
    return {"sentence": gt["sentence"]}


def write_dataset(out_dir, seed: int, per_task: int, tasks=TASKS, canvas: int = 48,
                  eval_per_task: int = None) -> dict:
    """Generate and write a corpus; returns the manifest dict."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    eval_per_task = max(1, per_task // 4) if eval_per_task is None else eval_per_task
    vocab = build_vocabulary()
    vocab.save(out / "vocab.txt")

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "canvas": canvas,
        "vocab": "vocab.txt",
        "classes": list(CLASS_NAMES),
        "morphology": list(MORPH_NAMES),
        "tasks": list(tasks),
        "counts": {},
        "samples": {},
    }

    for task in tasks:
        records = []
        for split, count, base in (("train", per_task, 0), ("eval", eval_per_task, per_task)):
            for i in range(count):
                scene_seed = seed * 1_000_003 + base + i
                scene = generate_scene(scene_seed, task, canvas)
                image, gt = render(scene)
                sample_id = f"{task}-{split}-{i:04d}"
                image_rel = f"images/{sample_id}.uhtn"
                save_uhtn(out / image_rel, image)
                mask_rel = None
                if task == "seg":
                    mask_rel = f"images/{sample_id}-mask.uhtn"
                    save_uhtn(out / mask_rel, gt["mask"].astype(np.float64))
                if task == "vqa":
                    question, answer = vqa_pair(scene)
                    prompt = make_prompt("vqa", question=question)
                    gt["answer"] = answer
                elif task == "mlm":
                    sentence, masked = mlm_pair(scene)
                    prompt = make_prompt("mlm", masked_sentence=masked)
                    gt["sentence"] = sentence
                elif task == "cls":
                    prompt = make_prompt("cls")
                else:
                    prompt = make_prompt(task, disease=scene.disease)
                records.append(SampleRecord(
                    id=sample_id, task=task, split=split, image_path=image_rel,
                    disease=scene.disease, prompt=prompt, gt=_gt_for(task, gt, mask_rel)))
        with open(out / "annotations" / f"{task}.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
        manifest["counts"][task] = {
            "train": sum(1 for r in records if r.split == "train"),
            "eval": sum(1 for r in records if r.split == "eval"),
        }
        manifest["samples"][task] = {
            "train": [r.id for r in records if r.split == "train"],
            "eval": [r.id for r in records if r.split == "eval"],
        }

    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def _parse_record(line: str, task: str, lineno: int, path) -> SampleRecord:
    try:
        raw = json.loads(line)
        kind = raw["task"]
        prompt = TaskPrompt(kind=kind, text=raw["prompt"],
                            disease=raw["disease"] if kind in ("det", "seg") else None)
        return SampleRecord(id=raw["id"], task=kind, split=raw["split"],
                            image_path=raw["image"], disease=raw["disease"],
                            prompt=prompt, gt=raw["gt"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed record at line {lineno}: {exc}") from None


class Dataset:
    """Lazy reader over a written corpus; images are cached on first load."""

    def __init__(self, root, manifest: dict, records: dict, vocab: Vocabulary):
        self.root = Path(root)
        self.manifest = manifest
        self._records = records          # task -> split -> [SampleRecord]
        self.vocab = vocab
        self._image_cache: dict = {}

    @property
    def canvas(self) -> int:
        return self.manifest["canvas"]

    @property
    def tasks(self) -> list:
        return list(self.manifest["tasks"])

    def records(self, task: str, split: str) -> list:
        try:
            return self._records[task][split]
        except KeyError:
            raise DataFormatError(f"no {split} records for task {task!r}") from None

    def load_image(self, record: SampleRecord) -> Tensor:
        if record.image_path not in self._image_cache:
            self._image_cache[record.image_path] = load_uhtn(self.root / record.image_path)
        return Tensor(self._image_cache[record.image_path])

    def load_mask(self, record: SampleRecord) -> np.ndarray:
        return load_uhtn(self.root / record.gt["mask_image"]).astype(bool)

    def det_arrays(self, record: SampleRecord):
        gt = record.gt
        return (np.asarray(gt["boxes"], dtype=np.float64).reshape(len(gt["boxes"]), 4),
                np.asarray(gt["classes"], dtype=np.intp),
                np.asarray(gt["morph"], dtype=np.intp).reshape(len(gt["classes"]), -1))


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise DataFormatError(f"{manifest_path}: manifest version {version} "
                              f"does not match expected {MANIFEST_VERSION}")
    vocab_path = root / manifest["vocab"]
    if not vocab_path.exists():
        raise DataFormatError(f"missing vocabulary file: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)

    records: dict = {}
    for task in manifest["tasks"]:
        path = root / "annotations" / f"{task}.jsonl"
        if not path.exists():
            raise DataFormatError(f"missing annotation file: {path}")
        by_split: dict = {"train": [], "eval": []}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = _parse_record(line, task, lineno, path)
                by_split.setdefault(rec.split, []).append(rec)
        records[task] = by_split
        for split, ids in manifest["samples"][task].items():
            found = [r.id for r in by_split.get(split, [])]
            if found != ids:
                raise DataFormatError(f"{path}: {split} records do not match manifest list")
        for split_records in by_split.values():
            for rec in split_records:
                img = root / rec.image_path
                if not img.exists():
                    raise DataFormatError(f"missing image file: {img}")
                if rec.task == "seg":
                    mask = root / rec.gt["mask_image"]
                    if not mask.exists():
                        raise DataFormatError(f"missing mask file: {mask}")
    return Dataset(root, manifest, records, vocab)
