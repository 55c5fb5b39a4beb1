import math

import numpy as np
import pytest

from unihema import nn
from unihema import tensor as T
from unihema.errors import DimensionError, LexicalError, UsageError
from unihema.synth import build_vocabulary, generate_scene, make_prompt, mlm_pair, vqa_pair
from unihema.tensor import Tensor
from unihema.text import (BOS, EOS, PAD, TaskPrompt, TextDecoder, TextEncoder, Vocabulary,
                          detokenize, text_loss, tokenize)

from conftest import gradcheck


@pytest.fixture
def vocab():
    return build_vocabulary()


class TestVocabulary:
    def test_empty_string(self, vocab):
        assert tokenize(vocab, "") == [BOS, EOS]
        assert detokenize(vocab, [BOS, EOS]) == ""

    def test_round_trip_all_templates(self, vocab):
        texts = [make_prompt("det", disease=d).text for d in
                 ("malaria", "sickle", "leukemia", "healthy")]
        for seed in range(20):
            scene = generate_scene(seed, "vqa")
            q, a = vqa_pair(scene)
            texts += [make_prompt("vqa", question=q).text, a]
            scene = generate_scene(seed, "mlm")
            s, m = mlm_pair(scene)
            texts += [make_prompt("mlm", masked_sentence=m).text, s]
        for text in texts:
            assert detokenize(vocab, tokenize(vocab, text)) == text

    def test_unknown_token_named(self, vocab):
        with pytest.raises(LexicalError) as exc:
            tokenize(vocab, "Q: what is a mitochondrion ?")
        assert "mitochondrion" in str(exc.value)

    def test_save_load_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        back = Vocabulary.load(path)
        assert len(back) == len(vocab)
        assert all(back.token_of(i) == vocab.token_of(i) for i in range(len(vocab)))


class TestPromptTemplates:
    def test_detection_template(self):
        p = make_prompt("det", disease="malaria")
        assert p.text == "This image is for the detection of malaria of cells."

    def test_vqa_prefix(self):
        scene = generate_scene(3, "vqa")
        q, _ = vqa_pair(scene)
        assert make_prompt("vqa", question=q).text.startswith("Q:")

    def test_mlm_prefix(self):
        scene = generate_scene(3, "mlm")
        _, masked = mlm_pair(scene)
        assert make_prompt("mlm", masked_sentence=masked).text.startswith("mask:")

    def test_cls_carries_no_text(self):
        assert make_prompt("cls").text == ""


class TestTextEncoder:
    def make(self, vocab, rng):
        reg = nn.ParamRegistry()
        return reg, TextEncoder(reg, rng, len(vocab), dim=8, heads=2, layers=2)

    def test_deterministic(self, vocab, rng):
        _, enc = self.make(vocab, rng)
        p = make_prompt("det", disease="malaria")
        a = enc(vocab, p).tokens.data
        b = enc(vocab, p).tokens.data
        assert np.array_equal(a, b)

    def test_disease_word_changes_row(self, vocab, rng):
        _, enc = self.make(vocab, rng)
        a = enc(vocab, make_prompt("det", disease="malaria")).tokens.data
        b = enc(vocab, make_prompt("det", disease="leukemia")).tokens.data
        assert a.shape == b.shape
        # token index 8 is the disease word (after BOS + 7 template words)
        assert np.any(a[8] != b[8])

    def test_classification_rejected(self, vocab, rng):
        _, enc = self.make(vocab, rng)
        with pytest.raises(UsageError):
            enc(vocab, make_prompt("cls"))

    def test_gradients(self, vocab, rng):
        reg, enc = self.make(vocab, rng)
        p = make_prompt("vqa", question="Q: is the nucleus dark ?")
        n_tokens = len(tokenize(vocab, p.text))
        r = rng.normal(size=(n_tokens, 8))
        params = [reg[n] for n in reg.names()]
        gradcheck(lambda: (enc(vocab, p).tokens * r).sum(), params, rel=1e-4)


class TestTextLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 16)))
        targets = [5, 7, 9]
        loss = text_loss(logits, targets)
        assert abs(float(loss.data) - math.log(16)) < 1e-12

    def test_one_hot_limit(self):
        targets = [2, 0, 1]  # middle one is PAD, excluded
        logits = np.zeros((3, 8))
        for i, t in enumerate(targets):
            logits[i, t] = 200.0
        loss = text_loss(Tensor(logits), targets)
        assert float(loss.data) < 1e-12

    def test_pad_positions_zero_loss_and_grad(self, rng):
        logits = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        targets = [PAD, 3, PAD, 5]
        T.backward(text_loss(logits, targets))
        assert np.all(logits.grad[0] == 0.0)
        assert np.all(logits.grad[2] == 0.0)
        assert np.any(logits.grad[1] != 0.0)

    def test_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            text_loss(Tensor(rng.normal(size=(3, 8))), [1, 2])

    def test_gradients(self, rng):
        logits = Tensor(rng.normal(size=(5, 12)), requires_grad=True)
        targets = [4, PAD, 7, 1, 2]
        gradcheck(lambda: text_loss(logits, targets), [logits], rel=1e-5)


class TestTextDecoder:
    def make(self, vocab, rng):
        reg = nn.ParamRegistry()
        return reg, TextDecoder(reg, rng, len(vocab), dim=8, heads=2, layers=2)

    def test_causal_prefix_invariance(self, vocab, rng):
        _, dec = self.make(vocab, rng)
        fused = Tensor(rng.normal(size=(4, 8)))
        ids = [BOS, 10, 11, 12, 13]
        base = dec.forward(ids, fused).data
        altered = list(ids)
        altered[4] = 20
        out = dec.forward(altered, fused).data
        assert np.array_equal(out[:4], base[:4])

    def test_eos_bias_gives_empty_generation(self, vocab, rng):
        _, dec = self.make(vocab, rng)
        dec.out.bias.data[:] = 0.0
        dec.out.bias.data[EOS] = 1e6
        fused = Tensor(rng.normal(size=(4, 8)))
        ids, truncated = dec.generate(fused, [BOS], max_len=10)
        assert ids == [] and truncated is False

    def test_greedy_deterministic(self, vocab, rng):
        _, dec = self.make(vocab, rng)
        fused = Tensor(rng.normal(size=(4, 8)))
        a = dec.generate(fused, [BOS, 5], max_len=6)
        b = dec.generate(fused, [BOS, 5], max_len=6)
        assert a == b

    def test_truncation_flagged(self, vocab, rng):
        _, dec = self.make(vocab, rng)
        dec.out.bias.data[:] = 0.0
        dec.out.bias.data[7] = 1e6  # never emits EOS
        fused = Tensor(rng.normal(size=(4, 8)))
        ids, truncated = dec.generate(fused, [BOS], max_len=5)
        assert ids == [7] * 5 and truncated is True
