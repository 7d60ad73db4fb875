"""Embedding branches: adapter-consolidated frozen backbones, the
hierarchical recipe encoder, segment averaging and description encoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Adapter, LayerNorm, Linear, Module, Parameter, TransformerLayer
from .losses import EmbeddingBundle, SectionProjection

TEXT_CONSUMERS = ("title", "ingredients", "instructions", "description")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    d: int = 64
    t_max: int = 32
    backbone_layers: int = 2
    backbone_heads: int = 2
    aggregator_layers: int = 2
    aggregator_heads: int = 4
    bottleneck: int = 16
    max_sentences: int = 15
    max_tokens: int = 20
    adapters_image: bool = True
    adapters_recipe: bool = True
    adapters_description: bool = True
    instruction_positions: bool = False
    per_pair_projection: bool = False
    shared_token_space: bool = True
    init_std: float = 0.01
    seed: int = 0


def pad_tokens(seqs: Sequence[Sequence[int]], vocab_size: int, t_max: int):
    """Right-pad token lists into an id matrix and a validity mask."""
    if not seqs:
        raise ValueError("no sequences to encode")
    longest = max(len(s) for s in seqs)
    if min(len(s) for s in seqs) == 0:
        raise ValueError("empty token sequence")
    if longest > t_max:
        raise ValueError(f"sequence of {longest} tokens exceeds the backbone limit {t_max}")
    ids = np.zeros((len(seqs), longest), dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    if ids.max() >= vocab_size or ids.min() < 0:
        raise ValueError(f"token id outside vocabulary of size {vocab_size}")
    return ids, mask


class AdapterSet(Module):
    """One adapter pair (after attention, after feed-forward) per backbone layer."""

    def __init__(self, d: int, bottleneck: int, n_layers: int, rng: np.random.Generator,
                 attn_slot: bool = True, ffn_slot: bool = True, init_std: Optional[float] = None):
        self.attn = [Adapter(d, bottleneck, rng, init_std) if attn_slot else None
                     for _ in range(n_layers)]
        self.ffn = [Adapter(d, bottleneck, rng, init_std) if ffn_slot else None
                    for _ in range(n_layers)]

    def slots(self, i: int):
        return self.attn[i], self.ffn[i]


class FrozenBackbone(Module):
    """Seeded random transformer standing in for a pre-trained encoder.

    All of its own weights are frozen; adapter sets are supplied per call.
    Output is mean-pooled over unpadded positions after a final layer norm.
    ``token_table`` seeds the token embedding from an existing table instead
    of a fresh draw, giving two backbones a common token space.
    """

    def __init__(self, vocab_size: int, t_max: int, d: int, n_layers: int, heads: int,
                 rng: np.random.Generator, token_table: Optional[np.ndarray] = None):
        self.vocab_size = vocab_size
        self.t_max = t_max
        table = rng.normal(0.0, 1.0, (vocab_size, d)) if token_table is None else np.array(token_table)
        if table.shape != (vocab_size, d):
            raise ValueError(f"token table shape {table.shape} differs from {(vocab_size, d)}")
        self.token_embedding = Parameter(table, trainable=False)
        self.position_embedding = Parameter(rng.normal(0.0, 0.1, (t_max, d)), trainable=False)
        self.layers = [TransformerLayer(d, heads, rng, trainable=False) for _ in range(n_layers)]
        self.ln_final = LayerNorm(d, trainable=False)

    def __call__(self, seqs: Sequence[Sequence[int]], adapters: Optional[AdapterSet] = None) -> Tensor:
        ids, mask = pad_tokens(seqs, self.vocab_size, self.t_max)
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        x = ad.embedding(self.token_embedding, ids) + ad.embedding(self.position_embedding, positions)
        for i, layer in enumerate(self.layers):
            slots = adapters.slots(i) if adapters is not None else (None, None)
            x = layer(x, mask, slots)
        return ad.masked_mean(self.ln_final(x), mask)


class SentenceAggregator(Module):
    """Trainable transformer over a list of sentence embeddings, mean-pooled."""

    def __init__(self, d: int, n_layers: int, heads: int, rng: np.random.Generator,
                 max_len: int = 15, positions: bool = False, init_std: Optional[float] = None):
        self.layers = [TransformerLayer(d, heads, rng, init_std=init_std) for _ in range(n_layers)]
        self.positions = Parameter(rng.normal(0.0, 0.02, (max_len, d))) if positions else None

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        if self.positions is not None:
            pos = np.broadcast_to(np.arange(x.shape[1]), x.shape[:2])
            x = x + ad.embedding(self.positions, pos)
        for layer in self.layers:
            x = layer(x, mask)
        return ad.masked_mean(x, mask)


class CARModel(Module):
    """Image, recipe, segment and description encoders sharing frozen backbones."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
        d = cfg.d
        nb = cfg.backbone_layers
        # The towers keep separate layers; with shared_token_space they start
        # from one token table, the way a jointly pre-trained pair shares a space.
        self.text_backbone = FrozenBackbone(cfg.vocab_size, cfg.t_max, d, nb, cfg.backbone_heads, rng)
        table = self.text_backbone.token_embedding.data if cfg.shared_token_space else None
        self.image_backbone = FrozenBackbone(cfg.vocab_size, cfg.t_max, d, nb, cfg.backbone_heads, rng,
                                             token_table=table)

        enabled = {
            "image": cfg.adapters_image,
            "title": cfg.adapters_recipe,
            "ingredients": cfg.adapters_recipe,
            "instructions": cfg.adapters_recipe,
            "description": cfg.adapters_description,
        }
        std = cfg.init_std or None
        self.adapters = {name: AdapterSet(d, cfg.bottleneck, nb, rng, init_std=std)
                         for name, on in enabled.items() if on}
        self.ingredient_aggregator = SentenceAggregator(
            d, cfg.aggregator_layers, cfg.aggregator_heads, rng, cfg.max_sentences, init_std=std)
        self.instruction_aggregator = SentenceAggregator(
            d, cfg.aggregator_layers, cfg.aggregator_heads, rng, cfg.max_sentences,
            positions=cfg.instruction_positions, init_std=std)
        self.fusion = Linear(3 * d, d, rng, init_std=std)
        self.projection = SectionProjection(d, rng, per_pair=cfg.per_pair_projection, init_std=std)
        self.assign_names()
        self.truncations: Counter = Counter()

    # -- bookkeeping ----------------------------------------------------
    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def _truncate(self, sentences: Sequence[Sequence[int]], kind: str) -> list:
        out = list(sentences)
        if len(out) > self.cfg.max_sentences:
            self.truncations[f"{kind}_sentences"] += 1
            out = out[: self.cfg.max_sentences]
        clipped = []
        for s in out:
            if len(s) > self.cfg.max_tokens:
                self.truncations[f"{kind}_tokens"] += 1
                s = s[: self.cfg.max_tokens]
            clipped.append(list(s))
        return clipped

    # -- branches -------------------------------------------------------
    def encode_images(self, images: Sequence[Sequence[int]]) -> Tensor:
        return self.image_backbone(images, self.adapters.get("image"))

    def encode_text(self, seqs: Sequence[Sequence[int]], consumer: str) -> Tensor:
        if consumer not in TEXT_CONSUMERS:
            raise ValueError(f"unknown text consumer {consumer!r}")
        return self.text_backbone(seqs, self.adapters.get(consumer))

    def encode_descriptions(self, descriptions: Sequence[Sequence[int]]) -> Tensor:
        return self.encode_text(descriptions, "description")

    def encode_section_lists(self, lists: Sequence[Sequence[Sequence[int]]], kind: str) -> Tensor:
        """Encode a batch of sentence lists (one list per recipe) into [B x d]."""
        aggregator = {"ingredients": self.ingredient_aggregator,
                      "instructions": self.instruction_aggregator}[kind]
        flat, index_rows = [], []
        for sentences in lists:
            if not sentences:
                raise ValueError(f"recipe has no {kind} sentences")
            sentences = self._truncate(sentences, kind)
            index_rows.append(list(range(len(flat), len(flat) + len(sentences))))
            flat.extend(sentences)
        sentence_emb = self.encode_text(flat, kind)
        width = max(len(r) for r in index_rows)
        index = np.zeros((len(lists), width), dtype=np.int64)
        mask = np.zeros((len(lists), width), dtype=bool)
        for i, row in enumerate(index_rows):
            index[i, : len(row)] = row
            mask[i, : len(row)] = True
        return aggregator(ad.embedding(sentence_emb, index), mask)

    def encode_recipes(self, titles, ingredients, instructions):
        """Return ``(E_R, E_tit, E_ing, E_ins)`` for a batch of recipes."""
        if any(len(t) == 0 for t in titles):
            raise ValueError("recipe title is empty")
        titles = [list(t[: self.cfg.max_tokens]) for t in titles]
        e_tit = self.encode_text(titles, "title")
        e_ing = self.encode_section_lists(ingredients, "ingredients")
        e_ins = self.encode_section_lists(instructions, "instructions")
        e_r = ad.tanh(self.fusion(ad.concat([e_tit, e_ing, e_ins], axis=1)))
        return e_r, e_tit, e_ing, e_ins

    def encode_batch(self, records, with_image: bool = True) -> EmbeddingBundle:
        """Encode a list of SampleRecords into an EmbeddingBundle."""
        e_r, e_tit, e_ing, e_ins = self.encode_recipes(
            [r.title_tokens for r in records],
            [r.ingredient_sentences for r in records],
            [r.instruction_sentences for r in records],
        )
        bundle = EmbeddingBundle(recipe=e_r, title=e_tit, ingredients=e_ing, instructions=e_ins)
        if not with_image:
            return bundle
        if any(r.image_tokens is None for r in records):
            raise ValueError("paired encoding requested for a record without an image")
        bundle.image = self.encode_images([r.image_tokens for r in records])
        if all(r.segment_vectors for r in records):
            bundle.segments = encode_segments_batch([r.segment_vectors for r in records])
        if all(r.description_tokens for r in records):
            bundle.description = self.encode_descriptions([r.description_tokens for r in records])
        return bundle


def encode_segments(segment_vectors: Sequence[Sequence[float]]) -> np.ndarray:
    """Average of 1-4 precomputed segment vectors; no trainable parameters."""
    n = len(segment_vectors)
    if n == 0:
        raise ValueError("at least one segment vector is required")
    if n > 4:
        raise ValueError(f"at most 4 segments are kept, got {n}")
    return np.mean(np.asarray(segment_vectors, dtype=np.float64), axis=0)


def encode_segments_batch(batch) -> Tensor:
    return Tensor(np.stack([encode_segments(v) for v in batch]))


# single-sample conveniences mirroring the batch methods


def encode_image(model: CARModel, image_tokens: Sequence[int]) -> Tensor:
    return model.encode_images([image_tokens]).reshape(-1)


def encode_description(model: CARModel, description_tokens: Sequence[int]) -> Tensor:
    return model.encode_descriptions([description_tokens]).reshape(-1)


def encode_section_list(model: CARModel, sentences: Sequence[Sequence[int]], kind: str) -> Tensor:
    return model.encode_section_lists([sentences], kind).reshape(-1)


def encode_recipe(model: CARModel, title, ingredients, instructions):
    out = model.encode_recipes([title], [ingredients], [instructions])
    return tuple(t.reshape(-1) for t in out)
