"""Visual prior: a short window of observation grids -> particle positions and soft grouping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import AppConfig, config_hash
from .dataset import DatasetManifest, ProposalSequence, normalize, rasterize_sequence
from .errors import ContractViolation
from .nn import (
    Adam,
    ConvBlockSpec,
    MLPSpec,
    ParamStore,
    conv_block_forward,
    init_conv_block,
    init_mlp,
    mlp_forward,
    rng_stream,
)
from .tensor import Tape, Tensor

logger = logging.getLogger("pinfer")

PREFIX = "vp"


@dataclass
class VisualPriorNet:
    params: ParamStore
    n_particles: int
    n_objects: int
    window: int = 4
    grid_size: int = 32
    channels: tuple[int, ...] = (32, 64, 128, 256)
    hidden: int = 256

    @property
    def blocks(self) -> list[ConvBlockSpec]:
        specs, c_in = [], 2 * self.window
        for i, c_out in enumerate(self.channels):
            specs.append(ConvBlockSpec(f"{PREFIX}.enc.block{i}", c_in, c_out))
            c_in = c_out
        return specs

    @property
    def feature_size(self) -> int:
        side = self.grid_size // (2 ** len(self.channels))
        return self.channels[-1] * side * side

    @property
    def position_head(self) -> MLPSpec:
        return MLPSpec(f"{PREFIX}.pos", (self.feature_size, self.hidden, self.window * self.n_particles * 3))

    @property
    def grouping_head(self) -> MLPSpec:
        return MLPSpec(f"{PREFIX}.group",
                       (self.feature_size, self.hidden, self.window * self.n_particles * self.n_objects))

    def metadata(self) -> dict:
        return {
            "kind": "visual",
            "n_particles": self.n_particles,
            "n_objects": self.n_objects,
            "window": self.window,
            "grid_size": self.grid_size,
            "channels": list(self.channels),
            "hidden": self.hidden,
        }


def init_visual_prior(n_particles: int, n_objects: int, *, window: int = 4, grid_size: int = 32,
                      channels=(32, 64, 128, 256), hidden: int = 256, seed: int = 0) -> VisualPriorNet:
    if grid_size % (2 ** len(channels)):
        raise ContractViolation(f"grid_size {grid_size} not divisible by 2^{len(channels)}")
    net = VisualPriorNet(ParamStore(), n_particles, n_objects, window, grid_size, tuple(channels), hidden)
    rng = rng_stream(seed, "visual", "init")
    for spec in net.blocks:
        init_conv_block(net.params, spec, rng)
    init_mlp(net.params, net.position_head, rng)
    init_mlp(net.params, net.grouping_head, rng)
    net.params.metadata.update(net.metadata())
    return net


def visual_prior_from_store(store: ParamStore) -> VisualPriorNet:
    meta = store.metadata
    if meta.get("kind") != "visual":
        raise ContractViolation(f"checkpoint is not a visual prior (kind={meta.get('kind')!r})")
    return VisualPriorNet(store, int(meta["n_particles"]), int(meta["n_objects"]), int(meta["window"]),
                          int(meta["grid_size"]), tuple(meta["channels"]), int(meta["hidden"]))


@dataclass
class VisualOutput:
    positions: Tensor   # [..., W, N, 3]
    logits: Tensor      # [..., W, N, M]

    @property
    def probs(self) -> np.ndarray:
        return T.softmax(self.logits.detach(), axis=-1).data


def vp_forward(net: VisualPriorNet, frames, training: bool = False) -> VisualOutput:
    """``frames[W, 2, H, W]`` (or a batch ``[B, W, 2, H, W]``) -> normalized positions and
    grouping logits for every frame of the window."""
    x = np.asarray(frames, dtype=np.float64) if not isinstance(frames, Tensor) else frames.data
    batched = x.ndim == 5
    if not batched:
        x = x[None]
    g = net.grid_size
    if x.ndim != 5 or x.shape[1:] != (net.window, 2, g, g):
        raise ContractViolation(
            f"visual prior expects {net.window} frames of shape (2, {g}, {g}), got {np.shape(frames)}"
        )
    b = x.shape[0]
    h = Tensor(x.reshape(b, 2 * net.window, g, g))
    for spec in net.blocks:
        h = conv_block_forward(net.params, h, spec, training=training)
    feat = h.reshape(b, net.feature_size)
    pos = mlp_forward(net.params, feat, net.position_head).reshape(b, net.window, net.n_particles, 3)
    logits = mlp_forward(net.params, feat, net.grouping_head).reshape(
        b, net.window, net.n_particles, net.n_objects
    )
    if not batched:
        pos, logits = pos[0], logits[0]
    return VisualOutput(pos, logits)


def vp_loss(pred: VisualOutput, true_positions, true_grouping) -> Tensor:
    """Mean over (t, i) of squared position error plus grouping cross entropy."""
    target = np.asarray(true_positions, dtype=np.float64)
    onehot = np.asarray(true_grouping, dtype=np.float64)
    if target.shape != pred.positions.shape or onehot.shape != pred.logits.shape:
        raise ContractViolation(
            f"vp_loss shapes disagree: {pred.positions.shape}/{target.shape}, "
            f"{pred.logits.shape}/{onehot.shape}"
        )
    diff = pred.positions - target
    return T.mean(T.tsum(diff * diff, axis=-1)) + T.cross_entropy(pred.logits, onehot)


def one_hot(labels, m: int) -> np.ndarray:
    return np.eye(m)[np.asarray(labels, dtype=np.int64)]


def check_env(manifest: DatasetManifest, config: AppConfig) -> None:
    if config.env.kind is not None and config.env.kind != manifest.env_kind.value:
        raise ContractViolation(
            f"dataset env {manifest.env_kind.value!r} does not match configured env {config.env.kind!r}"
        )


def write_metrics(rows: list[tuple[int, float]], path: str | Path | None) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, loss in rows:
            w.writerow([it, f"{loss:.8f}"])


def vp_train(manifest: DatasetManifest, config: AppConfig, seed: int,
             metrics_path: str | Path | None = None) -> ParamStore:
    check_env(manifest, config)
    stats = manifest.stats()
    m, tr = config.model, config.train
    train = list(manifest.trajectories("train"))
    if not train:
        raise ContractViolation("visual prior training needs at least one training trajectory")
    n, n_obj = train[0].n_particles, train[0].n_objects
    net = init_visual_prior(n, n_obj, window=m.vp_window, grid_size=m.grid_size,
                            channels=m.vp_channels, hidden=m.vp_hidden, seed=seed)
    grids = [rasterize_sequence(t.positions, stats, m.grid_size) for t in train]
    targets = [normalize(t.positions, stats) for t in train]
    labels = [one_hot(t.grouping, n_obj) for t in train]
    starts = [(k, s) for k, t in enumerate(train) for s in range(t.n_steps - m.vp_window + 1)]
    if not starts:
        raise ContractViolation(f"trajectories shorter than the visual window {m.vp_window}")

    opt = Adam(net.params, tr.vp_lr)
    rng = rng_stream(seed, "visual", "batches")
    rows: list[tuple[int, float]] = []
    t0 = time.perf_counter()
    for it in range(tr.vp_iterations):
        pick = rng.integers(0, len(starts), size=min(tr.vp_batch, len(starts)))
        frames = np.stack([grids[starts[j][0]][starts[j][1]:starts[j][1] + m.vp_window] for j in pick])
        pos = np.stack([targets[starts[j][0]][starts[j][1]:starts[j][1] + m.vp_window] for j in pick])
        grp = np.stack([np.broadcast_to(labels[starts[j][0]], (m.vp_window, n, n_obj)) for j in pick])
        with Tape():
            loss = vp_loss(vp_forward(net, frames, training=True), pos, grp)
            grads = T.backward(loss, net.params.trainable())
        opt.step(grads)
        value = loss.item()
        rows.append((it, value))
        if it % tr.log_every == 0 or it == tr.vp_iterations - 1:
            logger.info("vp_train iter=%s loss=%.6f elapsed=%.1fs", it, value, time.perf_counter() - t0)
    write_metrics(rows, metrics_path)
    net.params.metadata.update({
        "env": manifest.env_kind.value,
        "norm_stats": stats.to_dict(),
        "config_hash": config_hash(config.model, config.env),
        "seed": seed,
    })
    return net.params


def sliding_windows(n_steps: int, window: int) -> list[tuple[int, list[int]]]:
    """(window start, emitted frame indices) for every window of a sliding pass."""
    if n_steps < window:
        raise ContractViolation(f"sequence of {n_steps} frames is shorter than the window {window}")
    plan = [(0, list(range(window)))]
    plan += [(s, [s + window - 1]) for s in range(1, n_steps - window + 1)]
    return plan


def vp_infer_sliding(net: VisualPriorNet, frames, trace: list | None = None) -> ProposalSequence:
    """Proposals for every frame of a sequence with a window moved one frame at a time.

    The first window emits all its frames; each later window emits only its last.
    ``trace``, when given, receives ``(frame index, window start)`` for each emitted frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    positions, grouping = [], []
    for start, emitted in sliding_windows(frames.shape[0], net.window):
        out = vp_forward(net, frames[start:start + net.window])
        probs = out.probs
        for idx in emitted:
            positions.append(out.positions.data[idx - start])
            grouping.append(probs[idx - start])
            if trace is not None:
                trace.append((idx, start))
    return ProposalSequence(np.stack(positions), np.stack(grouping))
