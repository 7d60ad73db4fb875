"""Neural building blocks, the Adam optimizer and the step-decay schedule."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named leaf tensor.  Frozen parameters never receive optimizer updates."""

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        self.requires_grad = bool(value)

    def __repr__(self) -> str:
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


class Module:
    """Minimal container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            yield from _walk(value, path)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data[...] = arr


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _walk(item, f"{path}.{k}")


def _init(rng: np.random.Generator, fan_in: int, shape, std: Optional[float] = None) -> np.ndarray:
    # default std 1/sqrt(fan_in); trainable heads pass a small fixed std
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in) if std is None else std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, trainable: bool = True, init_std: Optional[float] = None):
        self.weight = Parameter(_init(rng, d_in, (d_in, d_out), init_std), trainable)
        self.bias = Parameter(np.zeros(d_out), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, trainable: bool = True):
        self.gamma = Parameter(np.ones(d), trainable)
        self.beta = Parameter(np.zeros(d), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Adapter(Module):
    """Bottleneck adapter: ``W_up . relu(W_down . h) + h`` applied row-wise.

    ``w_up`` starts at zero so a fresh adapter is the identity map.
    """

    def __init__(self, d: int, bottleneck: int, rng: np.random.Generator,
                 init_std: Optional[float] = None):
        if not 0 < bottleneck < d:
            raise ValueError(f"adapter bottleneck must satisfy 0 < {bottleneck} < {d}")
        self.d = d
        self.bottleneck = bottleneck
        self.w_down = Parameter(_init(rng, d, (d, bottleneck), init_std))
        self.w_up = Parameter(np.zeros((bottleneck, d)))

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d:
            raise ad.DimensionError(f"adapter expects last extent {self.d}, got {h.shape}")
        return ad.linear(ad.relu(ad.linear(h, self.w_down)), self.w_up) + h


def adapter_forward(adapter: Adapter, h_in: Tensor) -> Tensor:
    return adapter(h_in)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, trainable: bool = True,
                 init_std: Optional[float] = None):
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng, trainable=trainable, init_std=init_std)
        self.out = Linear(d, d, rng, trainable=trainable, init_std=init_std)
        self._last_weights: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        n, t, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(x).reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        key_mask = None if mask is None else np.asarray(mask, bool)[:, None, None, :]
        weights = ad.softmax(scores, key_mask)
        self._last_weights = weights.data
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.out(ctx)


class TransformerLayer(Module):
    """Pre-norm encoder layer with two optional adapter slots.

    Adapters sit on each sublayer's output, before that sublayer's residual
    addition.  Slots can also be supplied per call, which is how one frozen
    backbone serves several adapter sets.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 trainable: bool = True, ffn_mult: int = 4, init_std: Optional[float] = None):
        self.ln1 = LayerNorm(d, trainable)
        self.attn = MultiHeadAttention(d, heads, rng, trainable, init_std)
        self.ln2 = LayerNorm(d, trainable)
        self.ff1 = Linear(d, ffn_mult * d, rng, trainable=trainable, init_std=init_std)
        self.ff2 = Linear(ffn_mult * d, d, rng, trainable=trainable, init_std=init_std)
        self.adapter_attn: Optional[Adapter] = None
        self.adapter_ffn: Optional[Adapter] = None

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None,
                 adapters: Optional[Sequence[Optional[Adapter]]] = None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            mask = None if mask is None else np.asarray(mask, bool)[None, :]
        if mask is not None and not np.asarray(mask).any(axis=-1).all():
            raise ValueError("transformer layer: every position of a sequence is masked")
        a_attn, a_ffn = adapters if adapters is not None else (self.adapter_attn, self.adapter_ffn)

        h = self.attn(self.ln1(x), mask)
        if a_attn is not None:
            h = a_attn(h)
        x = x + h
        h = self.ff2(ad.relu(self.ff1(self.ln2(x))))
        if a_ffn is not None:
            h = a_ffn(h)
        x = x + h
        return x.reshape(x.shape[1:]) if squeeze else x


def transformer_layer_forward(layer: TransformerLayer, x: Tensor,
                              mask: Optional[np.ndarray] = None) -> Tensor:
    return layer(x, mask)


class Adam:
    """Adam with bias correction.  Frozen parameters are never touched.

    With ``strict`` a trainable parameter lacking a gradient is an error;
    otherwise it is skipped for that step (its moments are left as they are).
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: Optional[float] = None,
                 strict: bool = True):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.strict = strict
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params if p.trainable}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params if p.trainable}
        self._counts = {id(p): 0 for p in self.params if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        live = [p for p in self.params if p.trainable]
        if self.strict:
            for p in live:
                if p.grad is None:
                    raise RuntimeError(f"trainable parameter {p.name or p.shape} has no gradient")
        live = [p for p in live if p.grad is not None]
        if self.grad_clip is not None and live:
            total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in live))
            factor = min(1.0, self.grad_clip / (total + 1e-12))
        else:
            factor = 1.0
        self.t += 1
        for p in live:
            key = id(p)
            g = p.grad * factor
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._counts[key] += 1
            k = self._counts[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** k)
            v_hat = v / (1 - self.beta2 ** k)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()


def adam_step(state: Adam, lr: float) -> None:
    state.step(lr)


def lr_at_epoch(base_lr: float, epoch: int, decay: float = 0.1, every: int = 30) -> float:
    """Step decay: multiply by ``decay`` once per ``every`` epochs."""
    return base_lr * decay ** (epoch // every)


def count_params(model: Module) -> tuple[int, int]:
    trainable = frozen = 0
    for _, p in model.named_parameters():
        if p.trainable:
            trainable += p.size
        else:
            frozen += p.size
    return trainable, frozen
