"""Training objectives: triplet, circle (directional and symmetric),
section-pair recipe loss and their weighted multi-level combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module, Parameter, _init

SECTIONS = ("tit", "ing", "ins")
RECIPE_PAIRS = tuple((a, b) for a in SECTIONS for b in SECTIONS if a != b)


@dataclass(frozen=True)
class CircleConfig:
    m: float = 0.25
    gamma: float = 32.0
    pooled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"relaxation factor m must lie in [0, 1], got {self.m}")
        if self.gamma <= 0:
            raise ValueError(f"scale factor gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class MultiLevelConfig:
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 1.0
    use_segment_loss: bool = True
    use_description_loss: bool = True
    use_recipe_loss: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.sigma) < 0:
            raise ValueError("loss weights must be non-negative")


class SectionProjection(Module):
    """Bias-free square projection applied to the second section of each pair.

    With ``per_pair`` every ordered section pair owns its own map.
    """

    def __init__(self, d: int, rng: np.random.Generator, per_pair: bool = False,
                 init_std: Optional[float] = None):
        self.per_pair = per_pair
        if per_pair:
            self.weights = {f"{a}_{b}": Parameter(_init(rng, d, (d, d), init_std))
                            for a, b in RECIPE_PAIRS}
        else:
            self.weight = Parameter(_init(rng, d, (d, d), init_std))

    def __call__(self, x: Tensor, pair: Optional[tuple[str, str]] = None) -> Tensor:
        if self.per_pair:
            if pair is None:
                raise ValueError("per-pair projection needs the section pair")
            return ad.linear(x, self.weights[f"{pair[0]}_{pair[1]}"])
        return ad.linear(x, self.weight)


# ---------------------------------------------------------------------------
# triplet


def triplet_loss(c_p, c_n, m: float):
    """Hinge ``[c_n + m - c_p]_+`` for scalars or same-shape tensors."""
    if isinstance(c_p, Tensor) or isinstance(c_n, Tensor):
        return ad.relu(ad.as_tensor(c_n) + m - ad.as_tensor(c_p))
    return max(c_n + m - c_p, 0.0)


def _diag_rows(s: Tensor) -> Tensor:
    # matrix whose row i is filled with s[i, i]
    b = s.shape[0]
    return ad.matmul(s * np.eye(b), ad.Tensor(np.ones((b, b))))


def triplet_loss_directional(s: Tensor, m: float) -> Tensor:
    """Mean hinge over every (query, in-batch negative) pair of a square similarity matrix."""
    b = _check_square(s)
    off = np.ones((b, b)) - np.eye(b)
    hinge = ad.relu(s + m - _diag_rows(s)) * off
    return hinge.sum() * (1.0 / (b * (b - 1)))


def triplet_loss_symmetric(e_a: Tensor, e_b: Tensor, cfg: CircleConfig) -> Tensor:
    s = ad.cosine_matrix(e_a, e_b)
    return triplet_loss_directional(s, cfg.m) + triplet_loss_directional(s.T, cfg.m)


# ---------------------------------------------------------------------------
# circle


def _check_square(s: Tensor) -> int:
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ad.DimensionError(f"similarity matrix must be square, got {s.shape}")
    if s.shape[0] < 2:
        raise ValueError("circle loss needs a batch of at least 2 (no negatives otherwise)")
    return s.shape[0]


def circle_loss_directional(s: Tensor, cfg: CircleConfig = CircleConfig()) -> Tensor:
    """Circle loss for queries on rows of ``s``; the diagonal holds the positives.

    Per query ``log(1 + sum_neg exp(g*[s+m]_+*(s-m)) * exp(g*[1+m-c_p]_+*(1-m-c_p)))``,
    averaged over queries.  ``cfg.pooled`` instead takes one log over the
    batch-wide sums.
    """
    b = _check_square(s)
    eye = np.eye(b)
    m, g = cfg.m, cfg.gamma
    neg = ad.exp(ad.relu(s + m) * (s - m) * g) * (np.ones((b, b)) - eye)
    c_p = (s * eye).sum(axis=1)
    pos = ad.exp(ad.relu(1.0 + m - c_p) * (1.0 - m - c_p) * g)
    if cfg.pooled:
        return ad.log(neg.sum() * pos.sum() + 1.0)
    return ad.log(neg.sum(axis=1) * pos + 1.0).mean()


def circle_loss_symmetric(e_a: Tensor, e_b: Tensor, cfg: CircleConfig = CircleConfig()) -> Tensor:
    s = ad.cosine_matrix(e_a, e_b)
    return circle_loss_directional(s, cfg) + circle_loss_directional(s.T, cfg)


def pair_loss_fn(kind: str) -> Callable[[Tensor, Tensor, CircleConfig], Tensor]:
    if kind == "circle":
        return circle_loss_symmetric
    if kind == "triplet":
        return triplet_loss_symmetric
    raise ValueError(f"unknown loss {kind!r} (expected 'circle' or 'triplet')")


# ---------------------------------------------------------------------------
# recipe and multi-level


def recipe_loss(sections: dict, proj: SectionProjection, cfg: CircleConfig = CircleConfig(),
                pair_loss: Callable = circle_loss_symmetric) -> Tensor:
    """Average of the pair loss over the six ordered section pairs (a, b), a != b."""
    for name in SECTIONS:
        if sections.get(name) is None:
            raise ValueError(f"recipe loss: missing section {name!r}")
    total = None
    for a, b in RECIPE_PAIRS:
        term = pair_loss(sections[a], proj(sections[b], (a, b)), cfg)
        total = term if total is None else total + term
    return total * (1.0 / len(RECIPE_PAIRS))


@dataclass
class EmbeddingBundle:
    image: Optional[Tensor] = None
    recipe: Optional[Tensor] = None
    segments: Optional[Tensor] = None
    description: Optional[Tensor] = None
    title: Optional[Tensor] = None
    ingredients: Optional[Tensor] = None
    instructions: Optional[Tensor] = None

    def sections(self) -> dict:
        return {"tit": self.title, "ing": self.ingredients, "ins": self.instructions}


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def contributions(self) -> dict:
        return {k: self.weights[k] * v for k, v in self.components.items()}


def multi_level_loss(bundle: EmbeddingBundle, cfg: MultiLevelConfig = MultiLevelConfig(),
                     circle: CircleConfig = CircleConfig(), proj: Optional[SectionProjection] = None,
                     pair_loss: Callable = circle_loss_symmetric) -> LossBreakdown:
    """``L(V,R) + alpha L(S,R) + beta L(V,D) + sigma L_rec``.

    Terms whose toggle is off, whose weight is zero, or whose inputs are
    missing are not built at all, so they contribute exactly nothing.
    """
    total = pair_loss(bundle.image, bundle.recipe, circle)
    components = {"image_recipe": total.item()}
    weights = {"image_recipe": 1.0}

    def add_term(name, weight, enabled, build):
        nonlocal total
        if not enabled or weight == 0:
            return
        term = build()
        components[name] = term.item()
        weights[name] = weight
        total = total + term * weight

    add_term("segment_recipe", cfg.alpha,
             cfg.use_segment_loss and bundle.segments is not None,
             lambda: pair_loss(bundle.segments, bundle.recipe, circle))
    add_term("image_description", cfg.beta,
             cfg.use_description_loss and bundle.description is not None,
             lambda: pair_loss(bundle.image, bundle.description, circle))
    add_term("recipe", cfg.sigma,
             cfg.use_recipe_loss and proj is not None and bundle.title is not None,
             lambda: recipe_loss(bundle.sections(), proj, circle, pair_loss))
    return LossBreakdown(total, components, weights)
