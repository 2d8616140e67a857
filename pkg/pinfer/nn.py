"""Parameter storage and the neural building blocks shared by every model."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Array, Tensor

logger = logging.getLogger("pinfer")

RNG_ALGORITHM = "PCG64"


@dataclass(frozen=True)
class RngStream:
    """Seeded PCG64 streams; identical (seed, keys) give identical draws."""

    seed: int
    algorithm: str = RNG_ALGORITHM

    def generator(self, *keys: int | str) -> np.random.Generator:
        return rng_stream(self.seed, *keys)


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFFFFFFFFFF


def rng_stream(seed: int, *keys: int | str) -> np.random.Generator:
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class ParamStore:
    """Named tensors (trainable weights) and named buffers (e.g. BN running stats).

    Iteration is always in sorted name order.
    """

    def __init__(self, metadata: Mapping | None = None):
        self._entries: dict[str, Tensor] = {}
        self._buffers: dict[str, Array] = {}
        self.metadata: dict = dict(metadata or {})
        self.frozen = False

    def add(self, name: str, data) -> Tensor:
        if name in self._entries or name in self._buffers:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=not self.frozen, name=name)
        self._entries[name] = t
        return t

    def add_buffer(self, name: str, data) -> Array:
        if name in self._entries or name in self._buffers:
            raise ContractViolation(f"duplicate buffer name {name!r}")
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ContractViolation(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries or name in self._buffers

    def __len__(self) -> int:
        return len(self._entries)

    def buffer(self, name: str) -> Array:
        try:
            return self._buffers[name]
        except KeyError:
            raise ContractViolation(f"unknown buffer {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._entries)

    def buffer_names(self) -> list[str]:
        return sorted(self._buffers)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def buffers(self) -> Iterator[tuple[str, Array]]:
        for name in self.buffer_names():
            yield name, self._buffers[name]

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.items() if t.requires_grad}

    def freeze(self) -> "ParamStore":
        self.frozen = True
        for t in self._entries.values():
            t.requires_grad = False
        return self

    def snapshot(self) -> dict[str, Array]:
        out = {name: t.data.copy() for name, t in self.items()}
        out.update({name: b.copy() for name, b in self.buffers()})
        return out

    def merge(self, other: "ParamStore") -> "ParamStore":
        """Adopt every entry and buffer of ``other`` (names must not collide)."""
        for name, t in other.items():
            self.add(name, t.data)
        for name, b in other.buffers():
            self.add_buffer(name, b)
        return self


# -- initialization ------------------------------------------------------------

def init_affine(store: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{prefix}.bias", rng.uniform(-bound, bound, size=(fan_out,)))


def affine(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return T.matmul(x, store[f"{prefix}.weight"]) + store[f"{prefix}.bias"]


# -- MLP -------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    prefix: str
    sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "none"

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1


def init_mlp(store: ParamStore, spec: MLPSpec, rng: np.random.Generator) -> None:
    for i in range(spec.n_layers):
        init_affine(store, f"{spec.prefix}.layer{i}", spec.sizes[i], spec.sizes[i + 1], rng)


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "none":
        return x
    try:
        return T.ACTIVATIONS[name](x)
    except KeyError:
        raise ContractViolation(f"unknown activation {name!r}") from None


def mlp_forward(params: ParamStore, x: Tensor, spec: MLPSpec) -> Tensor:
    if x.shape[-1] != spec.sizes[0]:
        raise ContractViolation(
            f"{spec.prefix}: input last dim {x.shape[-1]} != {spec.sizes[0]}"
        )
    h = x
    for i in range(spec.n_layers):
        h = affine(params, f"{spec.prefix}.layer{i}", h)
        last = i == spec.n_layers - 1
        h = _activate(h, spec.output_activation if last else spec.hidden_activation)
    return h


# -- GRU ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GRUSpec:
    prefix: str
    input_size: int
    hidden_size: int


def init_gru(store: ParamStore, spec: GRUSpec, rng: np.random.Generator) -> None:
    h = spec.hidden_size
    bound = 1.0 / np.sqrt(h)
    store.add(f"{spec.prefix}.w_x", rng.uniform(-bound, bound, size=(spec.input_size, 3 * h)))
    store.add(f"{spec.prefix}.w_h", rng.uniform(-bound, bound, size=(h, 3 * h)))
    store.add(f"{spec.prefix}.b_x", np.zeros(3 * h))
    store.add(f"{spec.prefix}.b_h", np.zeros(3 * h))


def gru_cell(params: ParamStore, spec: GRUSpec, x: Tensor, h: Tensor) -> Tensor:
    """One step; gate columns are ordered (reset, update, candidate)."""
    n = spec.hidden_size
    gx = T.matmul(x, params[f"{spec.prefix}.w_x"]) + params[f"{spec.prefix}.b_x"]
    gh = T.matmul(h, params[f"{spec.prefix}.w_h"]) + params[f"{spec.prefix}.b_h"]
    r = T.sigmoid(gx[..., :n] + gh[..., :n])
    z = T.sigmoid(gx[..., n:2 * n] + gh[..., n:2 * n])
    cand = T.tanh(gx[..., 2 * n:] + r * gh[..., 2 * n:])
    return (1.0 - z) * cand + z * h


@dataclass(frozen=True)
class BiGRUSpec:
    prefix: str
    input_size: int
    hidden_size: int
    layers: int = 2

    def cell(self, direction: str, layer: int) -> GRUSpec:
        size_in = self.input_size if layer == 0 else self.hidden_size
        return GRUSpec(f"{self.prefix}.{direction}.l{layer}", size_in, self.hidden_size)


def init_bigru(store: ParamStore, spec: BiGRUSpec, rng: np.random.Generator) -> None:
    for direction in ("fwd", "bwd"):
        for layer in range(spec.layers):
            init_gru(store, spec.cell(direction, layer), rng)


def _run_direction(params: ParamStore, spec: BiGRUSpec, steps: list[Tensor],
                   direction: str) -> list[Tensor]:
    order = list(range(len(steps)))
    if direction == "bwd":
        order.reverse()
    inputs = [steps[t] for t in order]
    for layer in range(spec.layers):
        cell = spec.cell(direction, layer)
        h = Tensor(np.zeros(inputs[0].shape[:-1] + (spec.hidden_size,)))
        outputs = []
        for x in inputs:
            h = gru_cell(params, cell, x, h)
            outputs.append(h)
        inputs = outputs
    if direction == "bwd":
        inputs.reverse()
    return inputs


def bigru_forward(params: ParamStore, sequence: Tensor, spec: BiGRUSpec) -> Tensor:
    """``sequence[T, d]`` or ``[T, B, d]`` -> ``[T, 2h]`` / ``[T, B, 2h]``.

    Each direction is a stack of ``spec.layers`` GRUs started from zero state;
    step t concatenates the forward state (inputs 1..t) with the backward state
    (inputs t..T).
    """
    if sequence.ndim < 2 or sequence.shape[0] < 1:
        raise ContractViolation(f"bigru needs a non-empty sequence, got {sequence.shape}")
    if sequence.shape[-1] != spec.input_size:
        raise ContractViolation(f"bigru input dim {sequence.shape[-1]} != {spec.input_size}")
    steps = [sequence[t] for t in range(sequence.shape[0])]
    fwd = _run_direction(params, spec, steps, "fwd")
    bwd = _run_direction(params, spec, steps, "bwd")
    return T.stack([T.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=0)


# -- convolution block ------------------------------------------------------------

@dataclass(frozen=True)
class ConvBlockSpec:
    prefix: str
    in_channels: int
    out_channels: int
    momentum: float = 0.1
    eps: float = 1e-5


def init_conv_block(store: ParamStore, spec: ConvBlockSpec, rng: np.random.Generator) -> None:
    fan_in = spec.in_channels * 9
    bound = 1.0 / np.sqrt(fan_in)
    c_out = spec.out_channels
    store.add(f"{spec.prefix}.conv.weight",
              rng.uniform(-bound, bound, size=(c_out, spec.in_channels, 3, 3)))
    store.add(f"{spec.prefix}.conv.bias", rng.uniform(-bound, bound, size=(c_out,)))
    store.add(f"{spec.prefix}.bn.weight", np.ones(c_out))
    store.add(f"{spec.prefix}.bn.bias", np.zeros(c_out))
    store.add_buffer(f"{spec.prefix}.bn.running_mean", np.zeros(c_out))
    store.add_buffer(f"{spec.prefix}.bn.running_var", np.ones(c_out))


def conv_block_forward(params: ParamStore, grid: Tensor, spec: ConvBlockSpec,
                       training: bool = False) -> Tensor:
    """conv3x3 -> batch norm -> ReLU -> 2x2 average pool, on [C,H,W] or [B,C,H,W]."""
    batched = grid.ndim == 4
    x = grid if batched else grid.reshape((1,) + grid.shape)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ContractViolation(f"{spec.prefix}: expected {spec.in_channels} channels, got {grid.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractViolation(f"{spec.prefix}: odd spatial dims {x.shape[2:]}")
    p = spec.prefix
    h = T.conv2d_3x3(x, params[f"{p}.conv.weight"], params[f"{p}.conv.bias"])
    h = T.batch_norm2d(
        h, params[f"{p}.bn.weight"], params[f"{p}.bn.bias"],
        params.buffer(f"{p}.bn.running_mean"), params.buffer(f"{p}.bn.running_var"),
        training=training, momentum=spec.momentum, eps=spec.eps,
    )
    h = T.avg_pool2(T.relu(h))
    return h if batched else h.reshape(h.shape[1:])


# -- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    grads: Mapping[str, Array],
    lr: float,
    t: int,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update applied in place to every trainable entry."""
    if t < 1:
        raise ContractViolation(f"adam step index must be >= 1, got {t}")
    if params.frozen:
        raise ContractViolation("refusing to update a frozen parameter store")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.trainable().items():
        g = grads.get(name)
        if g is None:
            logger.warning("adam missing_grad name=%s treated_as=zero", name)
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state = AdamState()

    def step(self, grads: Mapping[str, Array]) -> None:
        self.t += 1
        adam_step(self.params, grads, self.lr, self.t, self.state,
                  self.beta1, self.beta2, self.eps)
