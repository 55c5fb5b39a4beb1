"""Deterministic synthetic blood-smear scenes, rendering, and prompt text.

Scenes are lists of rotated ellipses with per-cell class, colour and six
binary morphology flags; rendering supersamples 3x for antialiasing.
Ground truth is derived analytically: boxes are tight rotated-ellipse
bounds, masks use the pixel-centre-inside test, and all question/sentence
answers come from the stored flags so exact-match evaluation is well
defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .text import DETECTION_TEMPLATE, MLM_PREFIX, VQA_PREFIX, TaskPrompt, Vocabulary

TASKS = ("det", "seg", "cls", "vqa", "mlm")
_TASK_IDS = {t: i for i, t in enumerate(TASKS)}

CLASS_NAMES = ("erythrocyte", "leukocyte", "parasite", "sickle")
DISEASES = ("malaria", "sickle", "leukemia", "healthy")
MORPH_NAMES = ("dark-nucleus", "ringed-membrane", "granular-cytoplasm",
               "hollow-center", "thick-rim", "bluish-tint")
# (flag set, flag clear) adjectives used by question and sentence templates
MORPH_ADJECTIVES = (("dark", "faint"), ("ringed", "smooth"), ("granular", "clear"),
                    ("hollow", "solid"), ("thick", "thin"), ("bluish", "pinkish"))

_BASE_COLORS = {
    0: (0.86, 0.49, 0.45),   # erythrocyte
    1: (0.55, 0.45, 0.78),   # leukocyte
    2: (0.35, 0.28, 0.30),   # parasite
    3: (0.80, 0.55, 0.52),   # sickle
}

_VQA_TEMPLATES = (
    ("Q: what is the cell class ?", None),
    ("Q: is the nucleus dark ?", 0),
    ("Q: is the membrane ringed ?", 1),
    ("Q: is the cytoplasm granular ?", 2),
    ("Q: is the center hollow ?", 3),
)


@dataclass
class Cell:
    cx: float
    cy: float
    axis_a: float
    axis_b: float
    angle: float
    class_id: int
    color: tuple
    morph: tuple  # six 0/1 flags

    def half_extents(self) -> tuple:
        """Tight axis-aligned half width/height of the rotated ellipse."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw = math.sqrt((self.axis_a * c) ** 2 + (self.axis_b * s) ** 2)
        hh = math.sqrt((self.axis_a * s) ** 2 + (self.axis_b * c) ** 2)
        return hw, hh


@dataclass
class SyntheticScene:
    canvas: int
    cells: list
    disease: str
    task: str
    seed: int


def _box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _cell_sizes(rng, class_id: int, canvas: int) -> tuple:
    scale = canvas / 48.0
    if class_id == 0:
        a = rng.uniform(4.5, 7.0) * scale
        b = a * rng.uniform(0.75, 1.0)
    elif class_id == 1:
        a = rng.uniform(6.0, 9.0) * scale
        b = a * rng.uniform(0.8, 1.0)
    elif class_id == 2:
        a = rng.uniform(2.6, 4.0) * scale
        b = a * rng.uniform(0.7, 1.0)
    else:
        a = rng.uniform(7.0, 10.0) * scale
        b = rng.uniform(2.0, 3.4) * scale
    return a, b


def _jittered_color(rng, class_id: int) -> tuple:
    base = _BASE_COLORS[class_id]
    return tuple(float(np.clip(c + rng.uniform(-0.05, 0.05), 0.05, 0.98)) for c in base)


def _make_cell(rng, class_id: int, canvas: int, placed_boxes: list, centered: bool = False):
    """Place one cell fully inside the canvas with box IoU <= 0.3 vs others."""
    a, b = _cell_sizes(rng, class_id, canvas)
    for _ in range(40):
        angle = rng.uniform(0.0, math.pi)
        c, s = math.cos(angle), math.sin(angle)
        hw = math.sqrt((a * c) ** 2 + (b * s) ** 2)
        hh = math.sqrt((a * s) ** 2 + (b * c) ** 2)
        if centered:
            cx = canvas / 2.0 + rng.uniform(-1.0, 1.0)
            cy = canvas / 2.0 + rng.uniform(-1.0, 1.0)
        else:
            if hw >= canvas / 2 - 1 or hh >= canvas / 2 - 1:
                continue
            cx = rng.uniform(hw + 0.5, canvas - hw - 0.5)
            cy = rng.uniform(hh + 0.5, canvas - hh - 0.5)
        box = (cx - hw, cy - hh, cx + hw, cy + hh)
        if all(_box_iou(box, other) <= 0.3 for other in placed_boxes):
            placed_boxes.append(box)
            morph = tuple(int(rng.random() < 0.5) for _ in range(6))
            return Cell(cx, cy, a, b, angle, class_id, _jittered_color(rng, class_id), morph)
    return None


def _class_plan(rng, disease: str) -> list:
    if disease == "malaria":
        plan = [2] * int(rng.integers(1, 4)) + [0] * int(rng.integers(2, 6))
    elif disease == "sickle":
        plan = [3] * int(rng.integers(1, 4)) + [0] * int(rng.integers(2, 6))
    elif disease == "leukemia":
        plan = [1] * int(rng.integers(2, 5)) + [0] * int(rng.integers(1, 5))
    else:
        plan = [0] * int(rng.integers(3, 7)) + [1] * int(rng.integers(0, 2))
    return plan[:12]


def generate_scene(seed: int, task: str, canvas: int = 48) -> SyntheticScene:
    """Deterministic scene for (seed, task); class mix follows the disease tag."""
    if task not in TASKS:
        raise ConfigurationError(f"unknown task: {task}")
    rng = np.random.default_rng([seed, _TASK_IDS[task]])
    if task in ("cls", "vqa"):
        # single centered cell, larger so morphology is visible
        class_id = int(rng.integers(0, len(CLASS_NAMES)))
        a = rng.uniform(0.22, 0.30) * canvas
        b = a * rng.uniform(0.7, 0.95) if class_id != 3 else a * rng.uniform(0.3, 0.4)
        angle = rng.uniform(0.0, math.pi)
        cell = Cell(canvas / 2 + rng.uniform(-1, 1), canvas / 2 + rng.uniform(-1, 1),
                    a, b, angle, class_id, _jittered_color(rng, class_id),
                    tuple(int(rng.random() < 0.5) for _ in range(6)))
        disease = {2: "malaria", 3: "sickle"}.get(class_id, "healthy")
        return SyntheticScene(canvas=canvas, cells=[cell], disease=disease, task=task, seed=seed)
    disease = DISEASES[int(rng.integers(0, len(DISEASES)))]
    placed: list = []
    cells = []
    for class_id in _class_plan(rng, disease):
        cell = _make_cell(rng, class_id, canvas, placed)
        if cell is not None:
            cells.append(cell)
    if not cells:
        cells.append(_make_cell(rng, 0, canvas, []))
    return SyntheticScene(canvas=canvas, cells=cells, disease=disease, task=task, seed=seed)


# -- rendering ----------------------------------------------------------------

_SS = 3  # supersampling factor


def _ellipse_norm_radius(xs, ys, cell: Cell):
    """Normalized squared radius field: <= 1 inside the ellipse."""
    dx = xs - cell.cx
    dy = ys - cell.cy
    c, s = math.cos(cell.angle), math.sin(cell.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / cell.axis_a) ** 2 + (v / cell.axis_b) ** 2


def render(scene: SyntheticScene):
    """Rasterize to a (3,H,W) float image in [0,1] plus analytic ground truth."""
    h = w = scene.canvas
    rng = np.random.default_rng([scene.seed, _TASK_IDS[scene.task], 977])
    hi = h * _SS
    cols = (np.arange(hi) + 0.5) / _SS
    xs, ys = np.meshgrid(cols, cols)
    shade = 0.02 * np.sin(2 * math.pi * xs / w + rng.uniform(0, 2 * math.pi)) \
        * np.sin(2 * math.pi * ys / h + rng.uniform(0, 2 * math.pi))
    canvas = np.empty((hi, hi, 3))
    for ch, base in enumerate((0.93, 0.91, 0.89)):
        canvas[:, :, ch] = base + shade
    canvas += rng.normal(0.0, 0.008, size=(hi, hi, 1))

    for cell in scene.cells:
        r2 = _ellipse_norm_radius(xs, ys, cell)
        inside = r2 <= 1.0
        color = np.array(cell.color)
        if cell.morph[5]:
            color = np.clip(color * np.array([0.85, 0.95, 1.2]), 0.0, 1.0)
        layer = np.tile(color, (hi, hi, 1))
        rn = np.sqrt(np.maximum(r2, 0.0))
        if cell.morph[0]:
            layer[r2 <= 0.45 ** 2] *= 0.55
        if cell.morph[3]:
            hollow = r2 <= 0.30 ** 2
            layer[hollow] = 0.6 * np.array((0.93, 0.91, 0.89)) + 0.4 * layer[hollow]
        if cell.morph[2]:
            speck = (np.sin(xs * 7.1) * np.sin(ys * 9.3)) > 0.55
            layer[speck & inside] *= 0.8
        if cell.morph[1]:
            ring = (rn >= 0.78) & (rn <= 0.95)
            layer[ring] *= 0.72
        if cell.morph[4]:
            layer[rn >= 0.85] *= 0.5
        canvas[inside] = layer[inside]

    down = canvas.reshape(h, _SS, w, _SS, 3).mean(axis=(1, 3))
    image = np.clip(np.transpose(down, (2, 0, 1)), 0.0, 1.0)

    centers = np.arange(h) + 0.5
    pxs, pys = np.meshgrid(centers, centers)
    cell_masks = [_ellipse_norm_radius(pxs, pys, cell) <= 1.0 for cell in scene.cells]
    mask = np.zeros((h, w), dtype=bool)
    for m in cell_masks:
        mask |= m

    boxes = []
    for cell in scene.cells:
        hw_, hh_ = cell.half_extents()
        boxes.append((cell.cx / w, cell.cy / h, 2 * hw_ / w, 2 * hh_ / h))
    gt = {
        "boxes": np.array(boxes, dtype=np.float64).reshape(len(boxes), 4),
        "classes": np.array([c.class_id for c in scene.cells], dtype=np.intp),
        "morph": np.array([c.morph for c in scene.cells], dtype=np.intp).reshape(len(boxes), 6),
        "mask": mask,
        "cell_masks": cell_masks,
        "class_id": scene.cells[0].class_id if scene.cells else -1,
    }
    return image, gt


# -- prompt and answer text -----------------------------------------------------

def make_prompt(task: str, disease: str = None, question: str = None,
                masked_sentence: str = None) -> TaskPrompt:
    """Render the exact task prompt template."""
    if task in ("det", "seg"):
        if disease not in DISEASES:
            raise ConfigurationError(f"unknown disease name: {disease!r}")
        return TaskPrompt(kind=task, text=DETECTION_TEMPLATE.format(disease=disease),
                          disease=disease)
    if task == "vqa":
        return TaskPrompt(kind="vqa", text=question)
    if task == "mlm":
        return TaskPrompt(kind="mlm", text=f"{MLM_PREFIX} {masked_sentence}")
    if task == "cls":
        return TaskPrompt(kind="cls", text="")
    raise ConfigurationError(f"unknown task: {task}")


def vqa_pair(scene: SyntheticScene) -> tuple:
    """Deterministic question and flag-derived answer for a single-cell scene."""
    rng = np.random.default_rng([scene.seed, _TASK_IDS[scene.task], 31])
    question, flag = _VQA_TEMPLATES[int(rng.integers(0, len(_VQA_TEMPLATES)))]
    cell = scene.cells[0]
    if flag is None:
        answer = CLASS_NAMES[cell.class_id]
    else:
        answer = "yes" if cell.morph[flag] else "no"
    return question, answer


def mlm_pair(scene: SyntheticScene) -> tuple:
    """Full descriptive sentence and its masked variant for the first cell."""
    rng = np.random.default_rng([scene.seed, _TASK_IDS[scene.task], 67])
    cell = scene.cells[0]
    nucleus = MORPH_ADJECTIVES[0][0 if cell.morph[0] else 1]
    rim = MORPH_ADJECTIVES[4][0 if cell.morph[4] else 1]
    words = ["the", "image", "shows", "a", CLASS_NAMES[cell.class_id], "cell",
             "with", "a", nucleus, "nucleus", "and", "a", rim, "rim", "."]
    sentence = " ".join(words)
    slot = (4, 8, 12)[int(rng.integers(0, 3))]
    masked = words.copy()
    masked[slot] = "<mask>"
    return sentence, " ".join(masked)


def build_vocabulary() -> Vocabulary:
    """Closed word list covering every template the generator can emit."""
    words: list = []
    words += DETECTION_TEMPLATE.format(disease="x").replace(" x ", " ").split()
    words += list(DISEASES)
    words += [VQA_PREFIX, MLM_PREFIX]
    for question, _ in _VQA_TEMPLATES:
        words += question.split()
    words += ["yes", "no"]
    words += list(CLASS_NAMES)
    for pair in MORPH_ADJECTIVES:
        words += list(pair)
    words += ["the", "image", "shows", "a", "cell", "with", "nucleus", "and", "rim", "."]
    return Vocabulary.from_words(words)
