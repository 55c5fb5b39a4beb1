"""Operator command line: corpus generation, staged training, evaluation,
single-input inference, checkpoint inspection.

Exit codes: 0 ok, 2 usage, 3 data/format, 4 stage ordering. Every command
prints the resolved config digest it runs under.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .dataset import read_dataset, write_dataset
from .errors import (ConfigurationError, DataFormatError, DimensionError, LexicalError,
                     StageOrderError, UniHemaError, UsageError)
from .synth import DISEASES, TASKS
from .tensor import Tensor, load_uhtn
from .text import DETECTION_TEMPLATE, MLM_PREFIX, VQA_PREFIX, TaskPrompt
from .model import UniHemaModel
from .training import (build_stage_spec, checkpoint_stage, load_checkpoint,
                       model_from_checkpoint, run_stage)

_PROMPT_HELP = (
    f"detection/segmentation: {DETECTION_TEMPLATE.format(disease='<disease>')!r}; "
    f"question answering: '{VQA_PREFIX} <question>'; "
    f"sentence completion: '{MLM_PREFIX} <masked sentence>'; "
    "omit --prompt for single-cell classification"
)


def _digest_of(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataFormatError(f"output directory {out} is not empty (use --force to overwrite)")
    tasks = args.tasks.split(",") if args.tasks else list(TASKS)
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}; choose from {','.join(TASKS)}")
    flags = {"seed": args.seed, "per_task": args.per_task, "tasks": tasks,
             "canvas": args.canvas, "eval_per_task": args.eval_per_task}
    print(f"config digest: {_digest_of(flags)}")
    manifest = write_dataset(out, seed=args.seed, per_task=args.per_task, tasks=tasks,
                             canvas=args.canvas, eval_per_task=args.eval_per_task)
    total = sum(c["train"] + c["eval"] for c in manifest["counts"].values())
    print(f"wrote {total} samples across {len(tasks)} task(s) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config) if args.config else TrainConfig()
    dataset = read_dataset(args.data)
    if cfg.vocab_size == 0:
        cfg.vocab_size = len(dataset.vocab)
    print(f"config digest: {cfg.digest()}")
    model = UniHemaModel(cfg, dataset.vocab)
    resume_entries = None
    if args.resume:
        resume_entries = load_checkpoint(args.resume)
    elif args.stage > 1:
        raise StageOrderError(
            f"stage {args.stage} requires --resume with the stage {args.stage - 1} checkpoint")
    spec = build_stage_spec(args.stage, cfg, model)
    log_path = Path(str(args.out) + ".log.csv")
    run_stage(model, spec, cfg, dataset, args.out, resume_entries=resume_entries,
              log_path=log_path, max_steps=args.max_steps)
    print(f"stage {args.stage} checkpoint written to {args.out}")
    print(f"loss log written to {log_path}")
    from .report import render_loss_curve

    curve = Path(str(args.out) + ".loss.png")
    if render_loss_curve(log_path, curve):
        print(f"loss curve written to {curve}")
    return 0


def cmd_eval(args) -> int:
    from .report import render_figures, run_evaluation, write_pr_points, write_report_csv, write_report_json

    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {','.join(TASKS)}")
    model, _ = model_from_checkpoint(args.ckpt)
    print(f"config digest: {model.cfg.digest()}")
    dataset = read_dataset(args.data)
    reports, extras = run_evaluation(model, dataset, args.task, split=args.split)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report_path, reports)
    csv_path = report_path.with_suffix(".csv")
    write_report_csv(csv_path, reports)
    written = [report_path, csv_path]
    if "pr" in extras and extras["pr"]:
        pr_path = report_path.with_name(report_path.stem + "_pr.csv")
        write_pr_points(pr_path, extras["pr"])
        written.append(pr_path)
    written += render_figures(report_path.parent, reports, extras)
    for rep in reports:
        print(f"{rep.task} {rep.metric}: {rep.value:.4f} ({rep.sample_count} samples)")
    for path in written:
        print(f"wrote {path}")
    return 0


def _route_prompt(prompt_text: str) -> TaskPrompt:
    if prompt_text is None:
        return TaskPrompt(kind="cls", text="")
    head = "This image is for the detection of "
    tail = " of cells."
    if prompt_text.startswith(head) and prompt_text.endswith(tail):
        disease = prompt_text[len(head):-len(tail)]
        return TaskPrompt(kind="det", text=prompt_text, disease=disease)
    if prompt_text.startswith(VQA_PREFIX):
        return TaskPrompt(kind="vqa", text=prompt_text)
    if prompt_text.startswith(MLM_PREFIX):
        return TaskPrompt(kind="mlm", text=prompt_text)
    raise UsageError(f"cannot route prompt {prompt_text!r}; expected one of: {_PROMPT_HELP}")


def cmd_infer(args) -> int:
    model, _ = model_from_checkpoint(args.ckpt)
    print(f"config digest: {model.cfg.digest()}", file=sys.stderr)
    image = Tensor(load_uhtn(args.image))
    prompt = _route_prompt(args.prompt)
    if prompt.kind == "det":
        detections = model.predict_detections(image, prompt, score_threshold=args.threshold)
        for det in detections:
            print(det.to_json())
    elif prompt.kind == "vqa":
        answer, truncated = model.generate_text(image, prompt)
        print(json.dumps({"answer": answer, "truncated": truncated}))
    elif prompt.kind == "mlm":
        sentence, truncated = model.generate_text(image, prompt)
        print(json.dumps({"sentence": sentence, "truncated": truncated}))
    else:
        class_id, probs = model.predict_class(image)
        from .synth import CLASS_NAMES

        print(json.dumps({"class": class_id, "label": CLASS_NAMES[class_id],
                          "probs": [round(float(p), 6) for p in probs]}))
    return 0


def cmd_inspect(args) -> int:
    entries = load_checkpoint(args.ckpt)
    from .training import checkpoint_config

    cfg = checkpoint_config(entries)
    print(f"config digest: {cfg.digest()}")
    print(f"stage: {checkpoint_stage(entries)}")
    param_names = [k for k in entries if not k.startswith(("optim.", "meta."))]
    total = 0
    for name in param_names:
        shape = entries[name].shape
        total += int(np.prod(shape)) if shape else 1
        print(f"{name}  {tuple(shape)}")
    print(f"parameters: {len(param_names)} tensors, {total} values")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unihema",
        description="Unified multi-task blood-smear model: data synthesis, "
                    "staged training, evaluation, inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-task", type=int, default=256, dest="per_task",
                   help="training samples per task")
    p.add_argument("--eval-per-task", type=int, default=None, dest="eval_per_task",
                   help="eval samples per task (default: per-task // 4)")
    p.add_argument("--tasks", default=None, help="comma-separated subset of det,seg,cls,vqa,mlm")
    p.add_argument("--canvas", type=int, default=48, help="image side length")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    p.add_argument("--stage", type=int, required=True, choices=range(1, 7))
    p.add_argument("--resume", default=None, help="checkpoint of stage K-1, or of stage K to continue")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps",
                   help="hard cap on optimizer steps (smoke runs)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run one image through the model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="UHTN image tensor file")
    p.add_argument("--prompt", default=None, help=_PROMPT_HELP)
    p.add_argument("--threshold", type=float, default=0.5,
                   help="detection score threshold")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("inspect", help="list checkpoint parameters and metadata")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, LexicalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, ConfigurationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
