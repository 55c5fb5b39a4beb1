import json
import math

import numpy as np
import pytest

from unihema.dataset import read_dataset, write_dataset
from unihema.errors import ConfigurationError, DataFormatError
from unihema.synth import (CLASS_NAMES, Cell, DISEASES, SyntheticScene, build_vocabulary,
                           generate_scene, make_prompt, mlm_pair, render, vqa_pair)
from unihema.text import tokenize


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(42, "det")
        b = generate_scene(42, "det")
        assert a == b

    def test_cell_count_bounds_and_canvas(self):
        for seed in range(80):
            scene = generate_scene(seed, "det")
            assert 1 <= len(scene.cells) <= 12
            for cell in scene.cells:
                hw, hh = cell.half_extents()
                assert cell.cx - hw >= 0 and cell.cx + hw <= scene.canvas
                assert cell.cy - hh >= 0 and cell.cy + hh <= scene.canvas

    def test_class_census(self):
        counts = {c: 0 for c in range(len(CLASS_NAMES))}
        for seed in range(1000):
            for cell in generate_scene(seed, "det").cells:
                counts[cell.class_id] += 1
        assert all(n >= 50 for n in counts.values())

    def test_parasites_only_in_malaria(self):
        for seed in range(200):
            scene = generate_scene(seed, "det")
            has_parasite = any(c.class_id == 2 for c in scene.cells)
            assert has_parasite == (scene.disease == "malaria")

    def test_cls_single_centered_cell(self):
        for seed in range(30):
            scene = generate_scene(seed, "cls")
            assert len(scene.cells) == 1
            cell = scene.cells[0]
            assert abs(cell.cx - scene.canvas / 2) <= 1.0
            assert abs(cell.cy - scene.canvas / 2) <= 1.0

    def test_unknown_task(self):
        with pytest.raises(ConfigurationError):
            generate_scene(0, "pose")


class TestRender:
    def test_empty_scene(self):
        scene = SyntheticScene(canvas=48, cells=[], disease="healthy", task="det", seed=3)
        image, gt = render(scene)
        assert image.shape == (3, 48, 48)
        assert gt["boxes"].shape == (0, 4)
        assert not gt["mask"].any()

    def test_mask_area_close_to_analytic(self):
        cell = Cell(cx=32, cy=32, axis_a=16, axis_b=10, angle=0.0, class_id=0,
                    color=(0.8, 0.5, 0.5), morph=(0,) * 6)
        scene = SyntheticScene(canvas=64, cells=[cell], disease="healthy", task="det", seed=1)
        _, gt = render(scene)
        analytic = math.pi * 16 * 10
        assert abs(int(gt["mask"].sum()) - analytic) / analytic < 0.03

    def test_box_contains_all_cell_pixels(self):
        for seed in (3, 17, 64):
            scene = generate_scene(seed, "det")
            _, gt = render(scene)
            s = scene.canvas
            for cell_mask, box in zip(gt["cell_masks"], gt["boxes"]):
                rr, cc = np.nonzero(cell_mask)
                if rr.size == 0:
                    continue
                xs, ys = (cc + 0.5) / s, (rr + 0.5) / s
                cx, cy, w, h = box
                assert xs.min() >= cx - w / 2 and xs.max() <= cx + w / 2
                assert ys.min() >= cy - h / 2 and ys.max() <= cy + h / 2

    def test_pixel_range_and_determinism(self):
        scene = generate_scene(9, "seg")
        a, _ = render(scene)
        b, _ = render(scene)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestPrompts:
    def test_detection_template_exact(self):
        p = make_prompt("det", disease="malaria")
        assert p.text == "This image is for the detection of malaria of cells."

    def test_unknown_disease(self):
        with pytest.raises(ConfigurationError):
            make_prompt("det", disease="gout")

    def test_vqa_answers_derivable_from_flags(self):
        for seed in range(40):
            scene = generate_scene(seed, "vqa")
            question, answer = vqa_pair(scene)
            assert question.startswith("Q:")
            cell = scene.cells[0]
            if answer in ("yes", "no"):
                flag_by_q = {"dark": 0, "ringed": 1, "granular": 2, "hollow": 3}
                word = next(w for w in question.split() if w in flag_by_q)
                assert (answer == "yes") == bool(cell.morph[flag_by_q[word]])
            else:
                assert answer == CLASS_NAMES[cell.class_id]

    def test_mlm_masked_slot(self):
        for seed in range(20):
            scene = generate_scene(seed, "mlm")
            sentence, masked = mlm_pair(scene)
            sw, mw = sentence.split(), masked.split()
            assert len(sw) == len(mw)
            diffs = [i for i, (a, b) in enumerate(zip(sw, mw)) if a != b]
            assert len(diffs) == 1
            assert mw[diffs[0]] == "<mask>"

    def test_vocabulary_closed_over_corpus(self):
        vocab = build_vocabulary()
        for seed in range(60):
            for task in ("det", "seg"):
                scene = generate_scene(seed, task)
                tokenize(vocab, make_prompt(task, disease=scene.disease).text)
            scene = generate_scene(seed, "vqa")
            q, a = vqa_pair(scene)
            tokenize(vocab, make_prompt("vqa", question=q).text)
            tokenize(vocab, a)
            scene = generate_scene(seed, "mlm")
            s, m = mlm_pair(scene)
            tokenize(vocab, make_prompt("mlm", masked_sentence=m).text)
            tokenize(vocab, s)


class TestDatasetIO:
    def test_write_read_round_trip(self, tmp_path):
        out = tmp_path / "corpus"
        manifest = write_dataset(out, seed=5, per_task=4, canvas=32)
        ds = read_dataset(out)
        assert ds.manifest == manifest
        for task in ds.tasks:
            train = ds.records(task, "train")
            assert len(train) == 4
            image = ds.load_image(train[0])
            assert image.shape == (3, 32, 32)
        rec = ds.records("seg", "train")[0]
        assert ds.load_mask(rec).dtype == bool

    def test_byte_identical_regeneration(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_dataset(a, seed=7, per_task=3, canvas=32)
        write_dataset(b, seed=7, per_task=3, canvas=32)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_truncated_record_names_line(self, tmp_path):
        out = tmp_path / "corpus"
        write_dataset(out, seed=1, per_task=2, canvas=32)
        path = out / "annotations" / "det.jsonl"
        lines = path.read_text().splitlines()
        lines[1] = lines[1][: len(lines[1]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError) as exc:
            read_dataset(out)
        assert "line 2" in str(exc.value)

    def test_version_mismatch(self, tmp_path):
        out = tmp_path / "corpus"
        write_dataset(out, seed=1, per_task=2, canvas=32)
        manifest = json.loads((out / "manifest.json").read_text())
        manifest["version"] = 99
        (out / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataFormatError) as exc:
            read_dataset(out)
        assert "version" in str(exc.value)

    def test_missing_image_detected(self, tmp_path):
        out = tmp_path / "corpus"
        write_dataset(out, seed=1, per_task=2, canvas=32, tasks=("cls",))
        target = next((out / "images").glob("cls-train-*.uhtn"))
        target.unlink()
        with pytest.raises(DataFormatError) as exc:
            read_dataset(out)
        assert "missing image" in str(exc.value)

    def test_manifest_paths_resolve(self, tmp_path):
        out = tmp_path / "corpus"
        write_dataset(out, seed=3, per_task=5, canvas=32)
        ds = read_dataset(out)
        for task in ds.tasks:
            for split in ("train", "eval"):
                for rec in ds.records(task, split):
                    assert (out / rec.image_path).exists()
