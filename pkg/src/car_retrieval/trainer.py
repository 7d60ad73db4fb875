"""Training loop, checkpoints, evaluation and the ablation runner."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import ConfigError, TrainConfig
from .data import Corpus, DataError, SampleRecord, batches
from .encoders import CARModel, encode_segments
from .layers import Adam, count_params, lr_at_epoch
from .losses import LossBreakdown, multi_level_loss, pair_loss_fn, recipe_loss
from .retrieval import (DIRECTIONS, RetrievalReport, direction_factors, fuse, protocol_tag,
                        subset_protocol)

CHECKPOINT_MAGIC = b"CARCKPT\0"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    pass


class ModalityError(DataError):
    pass


def build_model(cfg: TrainConfig, vocab_size: Optional[int] = None) -> CARModel:
    return CARModel(cfg.model(vocab_size))


def frozen_digest(model: CARModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.trainable:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    epoch: int = 0
    val_r1: float = float("nan")

    def model(self) -> CARModel:
        model = build_model(self.config)
        model.load_state_dict(self.params)
        return model

    def save(self, path) -> None:
        header = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(self.config),
                             "epoch": self.epoch, "val_r1": self.val_r1}).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            key = name.encode()
            buf.write(struct.pack("<I", len(key)))
            buf.write(key)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise DataError(f"{path}: not a checkpoint file")
        pos = len(CHECKPOINT_MAGIC)

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(raw):
                raise DataError(f"{path}: truncated checkpoint")
            out = struct.unpack_from(fmt, raw, pos)
            pos += size
            return out

        (hlen,) = take("<I")
        header = json.loads(raw[pos:pos + hlen])
        pos += hlen
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: checkpoint version {header.get('version')} is not supported")
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (klen,) = take("<I")
            name = raw[pos:pos + klen].decode()
            pos += klen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q")
            n = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * n
            if pos + nbytes > len(raw):
                raise DataError(f"{path}: truncated checkpoint")
            params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += nbytes
        return cls(params, TrainConfig(**header["config"]), header["epoch"], header["val_r1"])


# ---------------------------------------------------------------------------
# encoding and evaluation


def encode_split(model: CARModel, records: Sequence[SampleRecord], chunk: int = 64) -> dict:
    """Encode every record once; returns numpy arrays keyed by modality.

    ``segments``/``description`` are ``None`` unless every record has them.
    """
    if not records:
        raise DataError("cannot encode an empty split")
    parts = {"image": [], "recipe": [], "description": []}
    has_desc = all(r.description_tokens for r in records)
    with ad.no_grad():
        for i in range(0, len(records), chunk):
            batch = records[i:i + chunk]
            e_r, *_ = model.encode_recipes([r.title_tokens for r in batch],
                                           [r.ingredient_sentences for r in batch],
                                           [r.instruction_sentences for r in batch])
            parts["recipe"].append(e_r.data)
            parts["image"].append(model.encode_images([r.image_tokens for r in batch]).data)
            if has_desc:
                parts["description"].append(
                    model.encode_descriptions([r.description_tokens for r in batch]).data)
    out = {k: (np.concatenate(v) if v else None) for k, v in parts.items()}
    out["segments"] = (np.stack([encode_segments(r.segment_vectors) for r in records])
                       if all(r.segment_vectors for r in records) else None)
    out["ids"] = [r.id for r in records]
    return out


def _require(tag: str, emb: dict) -> None:
    if tag in ("CAR_PLUS", "CAR_PLUS_PLUS") and emb.get("description") is None:
        raise ModalityError(f"protocol {tag}: descriptions required")
    if tag == "CAR_PLUS_PLUS" and emb.get("segments") is None:
        raise ModalityError(f"protocol {tag}: segments required")


def evaluate_embeddings(emb: dict, protocols: Iterable[str] = ("CAR",),
                        directions: Iterable[str] = DIRECTIONS, subset_size: int = 0,
                        n_subsets: int = 10, seed: int = 0) -> list[RetrievalReport]:
    tags = [protocol_tag(p) for p in protocols]
    for tag in tags:
        _require(tag, emb)
    n = len(emb["recipe"])
    size = subset_size or n
    reports = []
    for direction in directions:
        ir, id_, sr = direction_factors(direction, emb["image"], emb["recipe"],
                                        emb.get("description"), emb.get("segments"), emb.get("ids"))
        for tag in tags:
            dm = fuse(tag, ir, id_, sr)
            reports.append(subset_protocol(dm, size, n_subsets, seed, direction, tag))
    return reports


def evaluate(checkpoint, records: Sequence[SampleRecord], protocols: Iterable[str] = ("CAR",),
             directions: Iterable[str] = DIRECTIONS, subset_size: int = 0, n_subsets: int = 10,
             seed: int = 0) -> list[RetrievalReport]:
    """Encode ``records`` with a checkpoint (or live model) and report each protocol/direction."""
    protocols = [protocol_tag(p) for p in protocols]
    if not records:
        raise DataError("evaluation split is empty")
    for tag in protocols:
        if tag in ("CAR_PLUS", "CAR_PLUS_PLUS") and not all(r.description_tokens for r in records):
            raise ModalityError(f"protocol {tag}: descriptions required")
        if tag == "CAR_PLUS_PLUS" and not all(r.segment_vectors for r in records):
            raise ModalityError(f"protocol {tag}: segments required")
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    emb = encode_split(model, records)
    return evaluate_embeddings(emb, protocols, directions, subset_size, n_subsets, seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    best: Checkpoint
    log: list = field(default_factory=list)
    model: Optional[CARModel] = None

    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log)


def _fmt(value: float) -> float:
    return float(value)


def train(cfg: TrainConfig, corpus: Corpus, on_log: Optional[Callable[[str], None]] = None,
          batch_source: Callable = batches) -> TrainResult:
    """Train with alternating paired/unpaired batches and keep the best-validation checkpoint.

    Paired batches optimize the multi-level loss; unpaired batches optimize
    ``sigma * L_rec`` alone.  Selection uses mean R@1 (CAR protocol) in
    ``cfg.select_direction`` on the validation split.
    """
    cfg.validate()
    if corpus.config.embed_dim != cfg.d:
        raise ConfigError(f"model dim d={cfg.d} differs from corpus embed_dim={corpus.config.embed_dim}")
    cfg = replace(cfg, vocab_size=cfg.vocab_size or corpus.config.vocab_size)
    val = corpus.split("val")
    if not val:
        raise DataError("corpus has no validation split")
    if not corpus.split("train", paired=True):
        raise DataError("corpus has no paired training records")

    model = build_model(cfg)
    opt = Adam(model.trainable_parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay,
               grad_clip=cfg.grad_clip or None, strict=False)
    pair_loss = pair_loss_fn(cfg.loss)
    circle = cfg.circle()
    levels = cfg.multi_level()
    log: list[str] = []

    def emit(obj):
        line = json.dumps(obj)
        log.append(line)
        if on_log is not None:
            on_log(line)

    trainable, frozen = count_params(model)
    digest = frozen_digest(model)
    emit({"event": "config", "config": asdict(cfg)})
    emit({"event": "params", "trainable": trainable, "frozen": frozen,
          "ratio": trainable / (trainable + frozen), "frozen_sha256": digest})

    def validate():
        emb = encode_split(model, val)
        size = cfg.val_subset_size or len(val)
        reports = evaluate_embeddings(emb, ["CAR"], DIRECTIONS, size, cfg.val_n_subsets, cfg.seed)
        return {r.direction: r.mean.r1 for r in reports}

    val_r1 = validate()
    best = Checkpoint(model.state_dict(), cfg, 0, val_r1[cfg.select_direction])
    emit({"event": "epoch", "epoch": 0, "val_i2r_r1": val_r1["i2r"], "val_r2i_r1": val_r1["r2i"],
          "selected": True, "frozen_sha256": digest})

    use_unpaired = cfg.use_unpaired and cfg.use_recipe_loss and cfg.sigma > 0
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.base_lr, epoch, cfg.lr_decay, cfg.lr_step_epochs)
        for batch in batch_source(corpus, cfg.paired_batch, cfg.unpaired_batch, cfg.seed, epoch,
                                  use_unpaired=use_unpaired):
            if batch.kind == "paired":
                bundle = model.encode_batch(batch.records)
                out = multi_level_loss(bundle, levels, circle, model.projection, pair_loss)
            else:
                bundle = model.encode_batch(batch.records, with_image=False)
                rec = recipe_loss(bundle.sections(), model.projection, circle, pair_loss)
                out = LossBreakdown(rec * cfg.sigma, {"recipe": rec.item()}, {"recipe": cfg.sigma})
            value = out.total.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch.batch_id}")
            out.total.backward()
            opt.step(lr)
            step += 1
            emit({"event": "step", "epoch": epoch, "step": step, "batch": batch.batch_id,
                  "kind": batch.kind, "lr": lr, "total": value,
                  "components": out.components, "weights": out.weights})
        val_r1 = validate()
        score = val_r1[cfg.select_direction]
        selected = score > best.val_r1
        digest = frozen_digest(model)
        if selected:
            best = Checkpoint(model.state_dict(), cfg, epoch + 1, score)
        emit({"event": "epoch", "epoch": epoch + 1, "val_i2r_r1": val_r1["i2r"],
              "val_r2i_r1": val_r1["r2i"], "selected": selected, "frozen_sha256": digest})
    emit({"event": "done", "best_epoch": best.epoch, "best_val_r1": best.val_r1,
          "truncations": dict(sorted(model.truncations.items()))})
    return TrainResult(best, log, model)


# ---------------------------------------------------------------------------
# ablations

# Preset ablation rows: adapter toggles on image/recipe/description, the
# auxiliary losses and the unpaired data.  The segment encoder has no
# parameters, so there is no row with adapters on segments.
ABLATION_ROWS = {
    "row1": dict(epochs=0, adapters_image=False, adapters_recipe=False, adapters_description=False,
                 use_segment_loss=False, use_description_loss=False, use_recipe_loss=False,
                 use_unpaired=False),
    "row2": dict(adapters_image=True, adapters_recipe=False, adapters_description=False,
                 use_segment_loss=False, use_description_loss=False, use_recipe_loss=False,
                 use_unpaired=False),
    "row3": dict(adapters_image=False, adapters_recipe=True, adapters_description=False,
                 use_segment_loss=False, use_description_loss=False, use_recipe_loss=False,
                 use_unpaired=False),
    "row4": dict(adapters_image=True, adapters_recipe=True, adapters_description=False,
                 use_segment_loss=False, use_description_loss=False, use_recipe_loss=True,
                 use_unpaired=True),
    "row5": dict(adapters_description=False, use_description_loss=False),
    "row6": dict(adapters_description=False),
    "row7": dict(),
    "row8": dict(use_unpaired=False),
    "row9": dict(use_unpaired=False, use_recipe_loss=False),
}

LOSS_ROWS = {
    "triplet": dict(ABLATION_ROWS["row4"], loss="triplet"),
    "circle": dict(ABLATION_ROWS["row4"], loss="circle"),
}


@dataclass
class AblationRow:
    label: str
    config: TrainConfig
    reports: list
    best_epoch: int


def ablation_matrix(base: TrainConfig, rows: Sequence[tuple[str, dict]], corpus: Corpus,
                    protocols: Iterable[str] = ("CAR",), split: str = "test",
                    subset_size: int = 0, n_subsets: int = 10,
                    on_log: Optional[Callable[[str], None]] = None) -> list[AblationRow]:
    """Train and evaluate each labelled override row with the base seed."""
    labels = [label for label, _ in rows]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        raise ConfigError(f"duplicate ablation row labels: {dupes}")
    cfgs = [(label, base.with_overrides(overrides)) for label, overrides in rows]
    for _, cfg in cfgs:
        cfg.validate()
    records = corpus.split(split)
    table = []
    for label, cfg in cfgs:
        result = train(cfg, corpus, on_log=on_log)
        reports = evaluate(result.best, records, protocols, DIRECTIONS, subset_size, n_subsets,
                           cfg.seed)
        table.append(AblationRow(label, result.best.config, reports, result.best.epoch))
    return table
