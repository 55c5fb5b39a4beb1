"""Six-stage training: per-stage freezing, Adam, batching, checkpoints.

Stage order (tasks drawn / parameter groups updated):
  1 classification         backbone, token projection, image encoder, global
                           feature extractor, classification head
  2 vqa+mlm                text encoder and decoder
  3 cls+seg+det jointly    every visual module and head; text and CMF frozen
  4 detection+morphology   image decoder and detection head
  5 segmentation           query-guided mask former (incl. upsampler)
  6 vqa+mlm                cross-modal fusion and text decoder

Freezing is absolute: parameters outside the stage's trainable globs are
bitwise untouched. All randomness derives from (seed, stage, epoch), so a
resumed run reproduces a straight run bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .dataset import Dataset, SampleRecord
from .errors import ConfigurationError, DataFormatError, StageOrderError, UsageError
from .model import UniHemaModel
from .tensor import Tensor, read_uhtn_stream, uhtn_bytes
from .text import Vocabulary
from .synth import TASKS

PARAM_GROUPS = (
    "backbone.*", "token_proj.*", "image_encoder.*", "image_decoder.*",
    "text_encoder.*", "text_decoder.*",
    "hema_former.cmf.*", "hema_former.tgvr.*", "hema_former.scfe.*",
    "hema_former.qgmf.*", "hema_former.objectness.*",
    "heads.detect.*", "heads.classify.*",
)

_STAGE_TABLE = {
    1: (["backbone.*", "token_proj.*", "image_encoder.*", "hema_former.scfe.*",
         "heads.classify.*"], ["cls"]),
    2: (["text_encoder.*", "text_decoder.*"], ["vqa", "mlm"]),
    3: (["backbone.*", "token_proj.*", "image_encoder.*", "image_decoder.*",
         "hema_former.tgvr.*", "hema_former.scfe.*", "hema_former.qgmf.*",
         "hema_former.objectness.*", "heads.detect.*", "heads.classify.*"],
        ["cls", "seg", "det"]),
    4: (["image_decoder.*", "heads.detect.*"], ["det"]),
    5: (["hema_former.qgmf.*"], ["seg"]),
    6: (["hema_former.cmf.*", "text_decoder.*"], ["vqa", "mlm"]),
}


@dataclass
class StageSpec:
    stage_id: int
    trainable_globs: list
    frozen_globs: list
    tasks: list
    epochs: int


def build_stage_spec(stage: int, cfg: TrainConfig, model: UniHemaModel) -> StageSpec:
    if stage not in _STAGE_TABLE:
        raise ConfigurationError(f"stage must be 1..6, got {stage}")
    trainable_globs, tasks = _STAGE_TABLE[stage]
    reg = model.registry
    trainable = set()
    for glob in trainable_globs:
        hit = reg.match([glob])
        if not hit:
            raise ConfigurationError(f"stage {stage}: glob {glob!r} matches no parameters")
        trainable.update(hit)
    frozen_globs = [g for g in PARAM_GROUPS if trainable.isdisjoint(reg.match([g]))]
    covered = set(reg.match(list(trainable_globs) + frozen_globs))
    if covered != set(reg.names()):
        missing = sorted(set(reg.names()) - covered)
        raise ConfigurationError(f"stage {stage}: parameters not covered by any group: {missing}")
    return StageSpec(stage_id=stage, trainable_globs=list(trainable_globs),
                     frozen_globs=frozen_globs, tasks=list(tasks),
                     epochs=cfg.epochs_per_stage[stage - 1])


class AdamOptimizer:
    """Standard bias-corrected Adam over named parameters."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.step_count = 0

    def step(self, named_params, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- batching --------------------------------------------------------------------

def compose_epoch_batches(records_by_task: dict, tasks, per_task: int,
                          rng: np.random.Generator) -> list:
    """Round-robin batches under a seeded shuffle: per_task records per task.

    With equal per-task counts every sample appears exactly once per epoch;
    shorter task lists cycle to keep batches full.
    """
    tasks = list(tasks)
    if not tasks:
        raise UsageError("empty task pool")
    for t in tasks:
        if not records_by_task.get(t):
            raise DataFormatError(f"no records available for task {t!r}")
    perms = {t: rng.permutation(len(records_by_task[t])) for t in tasks}
    max_count = max(len(records_by_task[t]) for t in tasks)
    n_batches = math.ceil(max_count / per_task)
    batches = []
    for b in range(n_batches):
        batch = []
        for t in tasks:
            n = len(records_by_task[t])
            for j in range(per_task):
                pos = b * per_task + j
                if pos < n:
                    batch.append(records_by_task[t][perms[t][pos]])
                elif n < max_count:
                    batch.append(records_by_task[t][perms[t][pos % n]])
        batches.append(batch)
    return batches


def sample_from_record(dataset: Dataset, record: SampleRecord) -> dict:
    sample = {"task": record.task, "image": dataset.load_image(record),
              "prompt": record.prompt, "id": record.id}
    if record.task == "det":
        boxes, classes, morph = dataset.det_arrays(record)
        sample.update(boxes=boxes, classes=classes, morph=morph)
    elif record.task == "seg":
        sample["mask"] = dataset.load_mask(record)
    elif record.task == "cls":
        sample["class_id"] = record.gt["class"]
    elif record.task == "vqa":
        sample["answer"] = record.gt["answer"]
    elif record.task == "mlm":
        sample["sentence"] = record.gt["sentence"]
    return sample


# -- checkpoint container ----------------------------------------------------------

UHCK_MAGIC = b"UHCK"
UHCK_VERSION = 1


def save_checkpoint(path, entries: dict) -> None:
    """Write named tensors: magic, version u32 LE, count u32, then
    {name_len u32, name UTF-8, UHTN blob} per entry."""
    with open(path, "wb") as fh:
        fh.write(UHCK_MAGIC)
        fh.write(struct.pack("<II", UHCK_VERSION, len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(uhtn_bytes(np.asarray(arr)))


def load_checkpoint(path) -> dict:
    entries: dict = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != UHCK_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}, expected {UHCK_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise DataFormatError(f"{path}: truncated checkpoint header")
        version, count = struct.unpack("<II", header)
        if version != UHCK_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        for i in range(count):
            len_raw = fh.read(4)
            if len(len_raw) != 4:
                raise DataFormatError(f"{path}: truncated entry {i}")
            (name_len,) = struct.unpack("<I", len_raw)
            name = fh.read(name_len).decode("utf-8")
            entries[name] = read_uhtn_stream(fh, f"{path}:{name}")
    return entries


def _text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_entries(model: UniHemaModel, optimizer: AdamOptimizer,
                       stage_id: int, step: int) -> dict:
    entries: dict = {}
    for name, p in model.registry.items():
        entries[name] = p.data
    for name in model.registry.names():
        if name in optimizer.m:
            entries[f"optim.m.{name}"] = optimizer.m[name]
            entries[f"optim.v.{name}"] = optimizer.v[name]
    entries["optim.step"] = np.array([float(optimizer.step_count)])
    entries["meta.stage"] = np.array([float(stage_id)])
    entries["meta.step"] = np.array([float(step)])
    entries["meta.seed"] = np.array([float(model.cfg.seed)])
    entries["meta.config"] = _text_to_array(model.cfg.canonical_json())
    entries["meta.vocab"] = _text_to_array("\n".join(
        model.vocab.token_of(i) for i in range(len(model.vocab))))
    return entries


def checkpoint_config(entries: dict) -> TrainConfig:
    if "meta.config" not in entries:
        raise DataFormatError("checkpoint has no meta.config entry")
    return TrainConfig.from_dict(json.loads(_array_to_text(entries["meta.config"])))


def checkpoint_vocab(entries: dict) -> Vocabulary:
    if "meta.vocab" not in entries:
        raise DataFormatError("checkpoint has no meta.vocab entry")
    return Vocabulary(_array_to_text(entries["meta.vocab"]).split("\n"))


def checkpoint_stage(entries: dict) -> int:
    return int(entries["meta.stage"][0])


def checkpoint_step(entries: dict) -> int:
    return int(entries["meta.step"][0])


def apply_checkpoint(model: UniHemaModel, entries: dict) -> None:
    """Copy stored parameters into the model; refuse config or shape drift."""
    stored_cfg = checkpoint_config(entries)
    mismatch = model.cfg.diff(stored_cfg)
    if mismatch:
        raise ConfigurationError(f"checkpoint config mismatch on keys: {mismatch}")
    names = set(model.registry.names())
    stored = {k for k in entries if not k.startswith(("optim.", "meta."))}
    if stored != names:
        missing = sorted(names - stored)
        extra = sorted(stored - names)
        raise ConfigurationError(f"checkpoint parameters differ: missing={missing} extra={extra}")
    for name in model.registry.names():
        p = model.registry[name]
        arr = entries[name]
        if arr.shape != p.data.shape:
            raise ConfigurationError(f"checkpoint shape mismatch for {name}: "
                                     f"{arr.shape} vs {p.data.shape}")
        p.data = arr.copy()


def model_from_checkpoint(path) -> tuple:
    entries = load_checkpoint(path)
    cfg = checkpoint_config(entries)
    vocab = checkpoint_vocab(entries)
    model = UniHemaModel(cfg, vocab)
    apply_checkpoint(model, entries)
    return model, entries


# -- the stage runner ------------------------------------------------------------

def _planned_steps(spec: StageSpec, cfg: TrainConfig, batches_per_epoch: int) -> int:
    if cfg.steps_per_stage is not None:
        return int(cfg.steps_per_stage[spec.stage_id - 1])
    return spec.epochs * batches_per_epoch


def run_stage(model: UniHemaModel, spec: StageSpec, cfg: TrainConfig, dataset: Dataset,
              out_path, resume_entries: Optional[dict] = None,
              log_path=None, max_steps: Optional[int] = None) -> dict:
    """Train one stage and write its checkpoint; returns the written entries."""
    reg = model.registry
    if spec.stage_id > 1 and resume_entries is None:
        raise StageOrderError(f"stage {spec.stage_id} requires the stage "
                              f"{spec.stage_id - 1} checkpoint")
    optimizer = AdamOptimizer(cfg.learning_rate)
    start_step = 0
    if resume_entries is not None:
        prev_stage = checkpoint_stage(resume_entries)
        if prev_stage == spec.stage_id - 1:
            apply_checkpoint(model, resume_entries)
        elif prev_stage == spec.stage_id:
            apply_checkpoint(model, resume_entries)
            start_step = checkpoint_step(resume_entries)
            optimizer.step_count = int(resume_entries["optim.step"][0])
            for key, arr in resume_entries.items():
                if key.startswith("optim.m."):
                    optimizer.m[key[len("optim.m."):]] = arr.copy()
                elif key.startswith("optim.v."):
                    optimizer.v[key[len("optim.v."):]] = arr.copy()
        else:
            raise StageOrderError(f"stage {spec.stage_id} cannot start from a stage "
                                  f"{prev_stage} checkpoint")

    trainable_names = reg.match(spec.trainable_globs)
    named = [(n, reg[n]) for n in trainable_names]
    records_by_task = {t: dataset.records(t, "train") for t in spec.tasks}
    probe = compose_epoch_batches(records_by_task, spec.tasks,
                                  cfg.batch_per_task, np.random.default_rng(0))
    batches_per_epoch = len(probe)
    planned = _planned_steps(spec, cfg, batches_per_epoch)
    if max_steps is not None:
        planned = min(planned, max_steps)
    if start_step > planned:
        raise UsageError(f"checkpoint step {start_step} exceeds planned {planned} steps")

    log_fh = None
    writer = None
    if log_path is not None:
        fresh = start_step == 0
        log_fh = open(log_path, "a" if not fresh else "w", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(["step", "stage", "task", "loss"])

    epoch_cache = (-1, None)
    for step in range(start_step, planned):
        epoch, bidx = divmod(step, batches_per_epoch)
        if epoch_cache[0] != epoch:
            rng = np.random.default_rng([cfg.seed, spec.stage_id, epoch])
            epoch_cache = (epoch, compose_epoch_batches(records_by_task, spec.tasks,
                                                        cfg.batch_per_task, rng))
        batch = epoch_cache[1][bidx]
        per_task_losses: dict = {t: [] for t in spec.tasks}
        for record in batch:
            sample = sample_from_record(dataset, record)
            per_task_losses[record.task].append(model.loss_for_sample(sample))
        total = None
        task_means = {}
        for task in spec.tasks:
            losses = per_task_losses[task]
            if not losses:
                continue
            mean = losses[0] if len(losses) == 1 else sum(losses[1:], start=losses[0]) * (1.0 / len(losses))
            task_means[task] = mean
            total = mean if total is None else total + mean
        reg.zero_grad()
        T.backward(total)
        clip_gradients(named, cfg.clip_norm)
        lr = cfg.learning_rate
        if cfg.warmup_steps > 0:
            lr *= min(1.0, (step + 1) / cfg.warmup_steps)
        optimizer.step(named, lr=lr)
        if writer is not None:
            for task in spec.tasks:
                if task in task_means:
                    writer.writerow([step, spec.stage_id, task,
                                     f"{float(task_means[task].data):.6f}"])
            writer.writerow([step, spec.stage_id, "total", f"{float(total.data):.6f}"])

    if log_fh is not None:
        log_fh.close()
    entries = checkpoint_entries(model, optimizer, spec.stage_id, planned)
    save_checkpoint(out_path, entries)
    return entries
