"""Sample schema, synthetic corpus generation, JSONL serialization and
paired/unpaired batch iteration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

FORMAT_NAME = "car-corpus"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    title_tokens: List[int]
    ingredient_sentences: List[List[int]]
    instruction_sentences: List[List[int]]
    split: str
    paired: bool
    image_tokens: Optional[List[int]] = None
    segment_vectors: List[List[float]] = field(default_factory=list)
    description_tokens: Optional[List[int]] = None

    def validate(self, vocab_size: int, embed_dim: Optional[int] = None) -> None:
        if self.split not in SPLITS:
            raise DataError(f"{self.id}: unknown split {self.split!r}")
        if self.paired and self.image_tokens is None:
            raise DataError(f"{self.id}: paired record without image tokens")
        if not self.paired and (self.image_tokens is not None or self.segment_vectors
                                or self.description_tokens is not None):
            raise DataError(f"{self.id}: unpaired record carries image-side data")
        if not self.title_tokens:
            raise DataError(f"{self.id}: empty title")
        for name in ("ingredient_sentences", "instruction_sentences"):
            sentences = getattr(self, name)
            if not 1 <= len(sentences) <= 15:
                raise DataError(f"{self.id}: {name} must hold 1-15 sentences")
            if any(not 1 <= len(s) <= 20 for s in sentences):
                raise DataError(f"{self.id}: {name} sentences must hold 1-20 tokens")
        if len(self.segment_vectors) > 4:
            raise DataError(f"{self.id}: more than 4 segment vectors")
        if embed_dim is not None and any(len(v) != embed_dim for v in self.segment_vectors):
            raise DataError(f"{self.id}: segment vector dimension differs from {embed_dim}")
        seqs = [self.title_tokens, *self.ingredient_sentences, *self.instruction_sentences,
                self.image_tokens or [], self.description_tokens or []]
        for s in seqs:
            if any(not 0 <= t < vocab_size for t in s):
                raise DataError(f"{self.id}: token id outside vocabulary of size {vocab_size}")


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 200
    concept_count: int = 64
    embed_dim: int = 64
    n_train_paired: int = 512
    n_train_unpaired: int = 512
    n_val: int = 128
    n_test: int = 128
    noise_rate: float = 0.1
    tokens_per_image: int = 12
    seed: int = 0

    def validate(self) -> None:
        if self.concept_count < 1 or self.concept_count > self.vocab_size // 3:
            raise DataError(f"concept_count must lie in [1, vocab_size/3], got {self.concept_count}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise DataError(f"noise_rate must lie in [0, 0.5), got {self.noise_rate}")
        if self.embed_dim < 1 or self.tokens_per_image < 1:
            raise DataError("embed_dim and tokens_per_image must be positive")
        if min(self.n_train_paired, self.n_train_unpaired, self.n_val, self.n_test) < 0:
            raise DataError("split sizes must be non-negative")


@dataclass
class Corpus:
    config: SyntheticConfig
    records: List[SampleRecord]

    def split(self, name: str, paired: Optional[bool] = None) -> List[SampleRecord]:
        return [r for r in self.records
                if r.split == name and (paired is None or r.paired == paired)]

    def __len__(self) -> int:
        return len(self.records)


class TokenLayout:
    """Disjoint per-concept token blocks: image-like, recipe-like, shared.

    Ids past the three block ranges are generic filler tokens.
    """

    def __init__(self, vocab_size: int, concept_count: int):
        self.vocab_size = vocab_size
        self.block = vocab_size // (3 * concept_count)
        self.concept_count = concept_count
        self.filler = np.arange(3 * concept_count * self.block, vocab_size)

    def _range(self, offset: int, concept: int) -> np.ndarray:
        start = offset * self.concept_count * self.block + concept * self.block
        return np.arange(start, start + self.block)

    def image_block(self, concept: int) -> np.ndarray:
        return self._range(0, concept)

    def recipe_block(self, concept: int) -> np.ndarray:
        return self._range(1, concept)

    def shared_block(self, concept: int) -> np.ndarray:
        return self._range(2, concept)

    def section_block(self, concept: int, section: int) -> np.ndarray:
        block = self.recipe_block(concept)
        if len(block) < 3:
            return block
        return np.array_split(block, 3)[section]

    def concept_of_image_token(self, token: int) -> Optional[int]:
        if token < self.concept_count * self.block:
            return token // self.block
        return None


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def concept_directions(cfg: SyntheticConfig) -> np.ndarray:
    u = _rng(cfg.seed, 1).normal(size=(cfg.concept_count, cfg.embed_dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _draw(rng, n, sources, probs, noise_rate, vocab_size) -> List[int]:
    out = []
    for _ in range(n):
        if rng.random() < noise_rate:
            out.append(int(rng.integers(vocab_size)))
            continue
        pool = sources[rng.choice(len(sources), p=probs)]
        if len(pool) == 0:
            pool = sources[0]
        out.append(int(rng.choice(pool)))
    return out


def _make_record(cfg: SyntheticConfig, layout: TokenLayout, directions: np.ndarray,
                 k: int, split: str, paired: bool) -> SampleRecord:
    rng = _rng(cfg.seed, 0, k)
    concept = int(rng.integers(cfg.concept_count))
    v, nr = cfg.vocab_size, cfg.noise_rate
    shared, filler = layout.shared_block(concept), layout.filler

    def sentence(section, lo, hi):
        n = int(rng.integers(lo, hi + 1))
        return _draw(rng, n, [layout.section_block(concept, section), shared, filler],
                     [0.6, 0.15, 0.25], nr, v)

    title = sentence(0, 2, 5)
    ingredients = [sentence(1, 2, 6) for _ in range(int(rng.integers(2, 7)))]
    instructions = [sentence(2, 3, 10) for _ in range(int(rng.integers(2, 7)))]
    record = SampleRecord(id=f"s{k:06d}", title_tokens=title, ingredient_sentences=ingredients,
                          instruction_sentences=instructions, split=split, paired=paired)
    if not paired:
        return record
    record.image_tokens = _draw(rng, cfg.tokens_per_image, [layout.image_block(concept)], [1.0], nr, v)
    n_desc = int(rng.integers(6, 13))
    record.description_tokens = _draw(rng, n_desc, [layout.image_block(concept), shared, filler],
                                      [0.5, 0.3, 0.2], nr, v)
    n_seg = int(rng.integers(1, 5))
    noise = rng.normal(0.0, nr / np.sqrt(cfg.embed_dim), size=(n_seg, cfg.embed_dim))
    record.segment_vectors = (directions[concept] + noise).tolist()
    return record


def sample_concept(cfg: SyntheticConfig, k: int) -> int:
    """The latent concept planted in sample ``k`` (first draw of its generator)."""
    return int(_rng(cfg.seed, 0, k).integers(cfg.concept_count))


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> Corpus:
    """Deterministic corpus; sample ``k`` depends only on ``(cfg.seed, k)``."""
    cfg.validate()
    layout = TokenLayout(cfg.vocab_size, cfg.concept_count)
    directions = concept_directions(cfg)
    plan = ([("train", True)] * cfg.n_train_paired + [("train", False)] * cfg.n_train_unpaired
            + [("val", True)] * cfg.n_val + [("test", True)] * cfg.n_test)
    records = [_make_record(cfg, layout, directions, k, split, paired)
               for k, (split, paired) in enumerate(plan)]
    for r in records:
        r.validate(cfg.vocab_size, cfg.embed_dim)
    return Corpus(cfg, records)


# ---------------------------------------------------------------------------
# serialization

_REQUIRED = ("id", "title_tokens", "ingredient_sentences", "instruction_sentences", "split", "paired")


def save_corpus(corpus: Corpus, path) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config": asdict(corpus.config)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in corpus.records:
            fh.write(json.dumps(asdict(r)) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format/version {header.get('format')!r}/"
                        f"{header.get('version')!r}, expected {FORMAT_NAME!r}/{FORMAT_VERSION}")
    try:
        cfg = SyntheticConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}:1: bad generator config in header ({exc})") from None
    known = {f.name for f in fields(SampleRecord)}
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: record is not an object")
        for name in _REQUIRED:
            if name not in obj:
                raise DataError(f"{path}:{lineno}: missing required field {name!r}")
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
        try:
            record = SampleRecord(**obj)
            record.validate(cfg.vocab_size, cfg.embed_dim)
        except (DataError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        records.append(record)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate record ids")
    return Corpus(cfg, records)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    kind: str  # "paired" or "unpaired"
    index: int
    records: List[SampleRecord]

    @property
    def batch_id(self) -> str:
        return f"{self.kind[0]}{self.index}"


def _chunks(pool, size):
    out = [pool[i:i + size] for i in range(0, len(pool), size)]
    return [c for c in out if len(c) >= 2]


def batches(corpus: Corpus, paired_batch: int, unpaired_batch: int, seed: int, epoch: int,
            use_unpaired: bool = True) -> Iterator[Batch]:
    """Alternate paired and unpaired training batches, then drain the longer pool.

    Each pool is shuffled independently per ``(seed, epoch)``.  Batches with
    fewer than two records are dropped.
    """
    if paired_batch < 2 or unpaired_batch < 2:
        raise ValueError("batch sizes must be at least 2 (in-batch negatives)")
    paired = corpus.split("train", paired=True)
    if not paired:
        raise DataError("no paired training records")
    paired = [paired[i] for i in _rng(seed, 2, epoch, 0).permutation(len(paired))]
    p_batches = _chunks(paired, paired_batch)
    u_batches = []
    if use_unpaired:
        unpaired = corpus.split("train", paired=False)
        unpaired = [unpaired[i] for i in _rng(seed, 2, epoch, 1).permutation(len(unpaired))]
        u_batches = _chunks(unpaired, unpaired_batch)

    n = 0
    for i in range(max(len(p_batches), len(u_batches))):
        if i < len(p_batches):
            yield Batch("paired", n, p_batches[i])
            n += 1
        if i < len(u_batches):
            yield Batch("unpaired", n, u_batches[i])
            n += 1
