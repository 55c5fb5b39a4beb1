"""The assembled multi-task model and its per-task forward/loss paths.

Prompt routing mirrors the data side: detection/segmentation share the
disease template, question answering starts with "Q:", sentence completion
with "mask:", and classification runs image-only. The fusion stage feeds
the text decoder from the pre-encoder spatial embeddings, while top-K
selection, the global feature and the mask former consume the encoder
output.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import UsageError
from .fusion import (CrossModalFusion, MaskUpsampler, QueryMaskFormer, SegmentationLogits,
                     SingleCellExtractor, TextGuidedRefinement, select_topk)
from .heads import (ClassifyHead, DetectHead, DetectionOutput, ImageDecoder, MatchResult,
                    MatchWeights, classification_loss, detection_loss, detections_from_output,
                    hungarian_match, segmentation_loss)
from .nn import LinearLayer, ParamRegistry
from .tensor import Tensor
from .text import (BOS, EOS, PAD, TaskPrompt, TextDecoder, TextEncoder, Vocabulary,
                   detokenize, text_loss, tokenize)
from .vision import Backbone, ImageEncoder, TokenProjector, pooled_top_level


class UniHemaModel:
    def __init__(self, cfg: TrainConfig, vocab: Vocabulary):
        if cfg.vocab_size not in (0, len(vocab)):
            raise UsageError(f"config vocab_size {cfg.vocab_size} does not match vocabulary ({len(vocab)})")
        self.cfg = cfg
        self.vocab = vocab
        self.registry = ParamRegistry()
        reg = self.registry
        rng = np.random.default_rng(cfg.seed)
        c0, _, c2 = cfg.backbone_channels

        self.backbone = Backbone(reg, rng, cfg.backbone_channels, cfg.stem_stride)
        self.token_proj = TokenProjector(reg, rng, cfg.backbone_channels, cfg.M)
        self.image_encoder = ImageEncoder(reg, rng, cfg.M, cfg.heads, cfg.encoder_layers,
                                          cfg.mlp_ratio)
        self.text_encoder = TextEncoder(reg, rng, len(vocab), cfg.N, cfg.heads,
                                        cfg.text_encoder_layers, cfg.mlp_ratio)
        self.text_decoder = TextDecoder(reg, rng, len(vocab), cfg.N, cfg.heads,
                                        cfg.text_decoder_layers, cfg.mlp_ratio)
        self.cmf = CrossModalFusion(reg, rng, cfg.M, cfg.N, cfg.heads, cfg.L_f)
        self.tgvr = TextGuidedRefinement(reg, rng, cfg.M, cfg.N, cfg.heads)
        self.scfe = SingleCellExtractor(reg, rng, cfg.M)
        self.qgmf = QueryMaskFormer(reg, rng, c0, cfg.M, cfg.mask_channels)
        self.upsampler = MaskUpsampler(reg, rng, cfg.upsampler_channels)
        self.objectness = LinearLayer(reg, "hema_former.objectness", cfg.M, cfg.num_classes, rng)
        self.image_decoder = ImageDecoder(reg, rng, cfg.M, cfg.heads, cfg.decoder_layers,
                                          cfg.mlp_ratio)
        self.detect_head = DetectHead(reg, rng, cfg.M, cfg.num_classes, cfg.num_morph)
        self.classify_head = ClassifyHead(reg, rng, cfg.M, c2, cfg.num_classes)
        self.match_weights = MatchWeights(cfg.w_class, cfg.w_l1, cfg.w_giou, cfg.w_morph)

    # -- shared stages -----------------------------------------------------

    def encode_image(self, image: Tensor):
        feats = self.backbone(image)
        base = self.token_proj(feats)          # pre-encoder spatial embeddings
        vis = self.image_encoder(base)         # contextualized tokens
        return feats, base, vis

    def _object_embeddings(self, vis, text_emb) -> Tensor:
        topk = select_topk(vis, self.cfg.K, self.objectness)
        queries = self.tgvr.refine(topk, text_emb)
        return self.image_decoder(queries, vis.tokens)

    # -- detection ----------------------------------------------------------

    def detection_output(self, image: Tensor, prompt: TaskPrompt) -> DetectionOutput:
        _, _, vis = self.encode_image(image)
        text_emb = self.text_encoder(self.vocab, prompt)
        return self.detect_head(self._object_embeddings(vis, text_emb))

    def detection_loss_for(self, image: Tensor, prompt: TaskPrompt, gt_boxes: np.ndarray,
                           gt_classes: np.ndarray, gt_morph: np.ndarray) -> Tensor:
        out = self.detection_output(image, prompt)
        match = hungarian_match(out.boxes.data, out.class_probs.data, gt_boxes, gt_classes,
                                self.match_weights)
        return detection_loss(out, gt_boxes, gt_classes, gt_morph, match, self.match_weights)

    def predict_detections(self, image: Tensor, prompt: TaskPrompt,
                           score_threshold: Optional[float] = 0.5) -> list:
        return detections_from_output(self.detection_output(image, prompt), score_threshold)

    # -- segmentation ---------------------------------------------------------

    def segmentation_logits(self, image: Tensor, prompt: TaskPrompt) -> SegmentationLogits:
        feats, _, vis = self.encode_image(image)
        text_emb = self.text_encoder(self.vocab, prompt)
        obj = self._object_embeddings(vis, text_emb)
        return self.qgmf.masks(feats.levels[0], vis, obj)

    def upsampled_binary_logits(self, image: Tensor, prompt: TaskPrompt) -> Tensor:
        seg = self.segmentation_logits(image, prompt)
        first = T.slice_rows(seg.y, 0, 1)
        _, h, w = image.shape
        return self.upsampler.upsample(first, (h, w), self.cfg.upsample_mode)

    def segmentation_loss_for(self, image: Tensor, prompt: TaskPrompt,
                              gt_mask: np.ndarray) -> Tensor:
        up = self.upsampled_binary_logits(image, prompt)
        return segmentation_loss(up, gt_mask)

    def predict_mask(self, image: Tensor, prompt: TaskPrompt) -> np.ndarray:
        logits = self.upsampled_binary_logits(image, prompt).data[0]
        return (1.0 / (1.0 + np.exp(-logits))) > 0.5

    # -- classification ---------------------------------------------------------

    def classification_logits(self, image: Tensor, integrate: Optional[bool] = None) -> Tensor:
        feats, _, vis = self.encode_image(image)
        z = self.scfe.extract(vis.tokens)
        pooled = pooled_top_level(feats)
        if integrate is None:
            integrate = self.cfg.classify_integrate
        return self.classify_head.logits(z, pooled, integrate)

    def classification_loss_for(self, image: Tensor, class_id: int,
                                integrate: Optional[bool] = None) -> Tensor:
        feats, _, vis = self.encode_image(image)
        z = self.scfe.extract(vis.tokens)
        pooled = pooled_top_level(feats)
        if integrate is None:
            integrate = self.cfg.classify_integrate
        return classification_loss(self.classify_head, z, pooled, integrate, class_id)

    def predict_class(self, image: Tensor, integrate: Optional[bool] = None):
        logits = self.classification_logits(image, integrate).data[0]
        shifted = logits - logits.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        return int(np.argmax(probs)), probs

    # -- text generation (vqa / mlm) ------------------------------------------------

    def fused_text_tokens(self, image: Tensor, prompt: TaskPrompt) -> Tensor:
        _, base, _ = self.encode_image(image)
        text_emb = self.text_encoder(self.vocab, prompt)
        return self.cmf.fuse(text_emb, base.tokens)

    def _teacher_sequences(self, prompt: TaskPrompt, target_text: str):
        prefix = tokenize(self.vocab, prompt.text)[:-1]       # BOS + prompt tokens
        answer = tokenize(self.vocab, target_text)[1:]        # target tokens + EOS
        full = prefix + answer
        dec_in = full[:-1]
        targets = np.full(len(dec_in), PAD, dtype=np.intp)
        targets[len(prefix) - 1:] = full[len(prefix):]
        return dec_in, targets

    def text_loss_for(self, image: Tensor, prompt: TaskPrompt, target_text: str) -> Tensor:
        fused = self.fused_text_tokens(image, prompt)
        dec_in, targets = self._teacher_sequences(prompt, target_text)
        logits = self.text_decoder.forward(dec_in, fused)
        return text_loss(logits, targets)

    def generate_text(self, image: Tensor, prompt: TaskPrompt, max_len: int = 24):
        """Greedy answer/sentence generation; returns (text, truncated)."""
        fused = self.fused_text_tokens(image, prompt)
        prefix = tokenize(self.vocab, prompt.text)[:-1]
        ids, truncated = self.text_decoder.generate(fused, prefix, max_len)
        return detokenize(self.vocab, ids), truncated

    # -- batch-facing dispatcher ------------------------------------------------

    def loss_for_sample(self, sample: dict) -> Tensor:
        """sample: task, image (Tensor), prompt (TaskPrompt), gt fields."""
        task = sample["task"]
        image = sample["image"]
        if task == "det":
            return self.detection_loss_for(image, sample["prompt"], sample["boxes"],
                                           sample["classes"], sample["morph"])
        if task == "seg":
            return self.segmentation_loss_for(image, sample["prompt"], sample["mask"])
        if task == "cls":
            return self.classification_loss_for(image, sample["class_id"])
        if task == "vqa":
            return self.text_loss_for(image, sample["prompt"], sample["answer"])
        if task == "mlm":
            return self.text_loss_for(image, sample["prompt"], sample["sentence"])
        raise UsageError(f"unknown task: {task}")

    def num_parameters(self) -> int:
        return self.registry.total_size()
