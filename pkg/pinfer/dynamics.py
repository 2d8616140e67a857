"""Dynamics prior: particle graphs, spatial message passing and one-step prediction.

Positions are in normalized space throughout; :func:`rollout` is the only entry
point that takes and returns physical units.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import AppConfig, config_hash
from .dataset import DatasetManifest, NormStats, denormalize, normalize, training_windows
from .errors import ContractViolation, DivergenceError
from .geometry import neighbor_pairs
from .nn import Adam, MLPSpec, ParamStore, affine, init_affine, init_mlp, mlp_forward, rng_stream
from .sim import Trajectory
from .tensor import Tape, Tensor
from .visual import check_env, write_metrics

logger = logging.getLogger("pinfer")

PREFIX = "dp"
EDGE_FEATURES = 5
_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def params_to_unit(params, param_range: tuple[float, float]) -> np.ndarray:
    lo, hi = param_range
    return 2.0 * (np.asarray(params, dtype=np.float64) - lo) / (hi - lo) - 1.0


def unit_to_params(y, param_range: tuple[float, float]):
    """Inverse of :func:`params_to_unit`; works on arrays and tensors."""
    lo, hi = param_range
    return (y + 1.0) * (0.5 * (hi - lo)) + lo


# -- graphs ------------------------------------------------------------------------------

@dataclass
class SceneGraph:
    vertices: Tensor        # [N, 3K + n_p]
    edges: np.ndarray       # [E, 2] (sender, receiver)
    edge_attr: Tensor       # [E, 5]: same-object flag, x_r - x_s, |x_r - x_s|

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def positions(self) -> Tensor:
        return self.vertices[:, :3]


def build_graph(window, grouping_hard, params_normalized, *, radius: float = 0.08,
                history: int = 4) -> SceneGraph:
    """Graph over the latest frame of ``window[K, N, 3]``.

    Vertex features are the latest position, offsets of the earlier frames from
    it, then the normalized parameters.
    """
    w = T.as_tensor(window)
    if w.ndim != 3 or w.shape[0] != history or w.shape[2] != 3:
        raise ContractViolation(f"build_graph needs a window of shape ({history}, N, 3), got {w.shape}")
    grouping = np.asarray(grouping_hard, dtype=np.int64)
    n = w.shape[1]
    if grouping.shape != (n,):
        raise ContractViolation(f"grouping length {grouping.shape} != particle count {n}")
    latest = w[history - 1]
    parts = [latest] + [w[k] - latest for k in range(history - 1)]
    p = T.as_tensor(params_normalized).reshape(1, -1)
    parts.append(p * np.ones((n, 1)))
    vertices = T.concat(parts, axis=-1)

    edges = neighbor_pairs(latest.data, radius)
    s, r = edges[:, 0], edges[:, 1]
    same = (grouping[s] == grouping[r]).astype(np.float64).reshape(-1, 1)
    disp = T.take(latest, r, axis=0) - T.take(latest, s, axis=0)
    dist = T.sqrt(T.tsum(disp * disp, axis=-1, keepdims=True) + 1e-12)
    edge_attr = T.concat([Tensor(same), disp, dist], axis=-1)
    return SceneGraph(vertices, edges, edge_attr)


# -- network --------------------------------------------------------------------------------

@dataclass
class DynamicsNet:
    params: ParamStore
    n_params: int
    hidden: int = 150
    history: int = 4
    edge_radius: float = 0.08
    mp_rounds: int = 1
    param_range: tuple[float, float] = (0.0, 1.0)
    norm_stats: NormStats | None = None

    @property
    def vertex_size(self) -> int:
        return 3 * self.history + self.n_params

    @property
    def enc_v(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.enc_v", (self.vertex_size, h, h, h), output_activation="relu")

    @property
    def enc_e(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.enc_e", (EDGE_FEATURES, h, h, h), output_activation="relu")

    @property
    def nonrigid(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.nonrigid", (self.history * h, h, h, 3))

    @property
    def rigid(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.rigid", (self.history * h, h, h, 7))

    def metadata(self) -> dict:
        meta = {
            "kind": "dynamics",
            "n_params": self.n_params,
            "hidden": self.hidden,
            "history": self.history,
            "edge_radius": self.edge_radius,
            "mp_rounds": self.mp_rounds,
            "param_range": list(self.param_range),
        }
        if self.norm_stats is not None:
            meta["norm_stats"] = self.norm_stats.to_dict()
        return meta


def init_dynamics(n_params: int, *, hidden: int = 150, history: int = 4, edge_radius: float = 0.08,
                  mp_rounds: int = 1, param_range=(0.0, 1.0), norm_stats: NormStats | None = None,
                  seed: int = 0) -> DynamicsNet:
    net = DynamicsNet(ParamStore(), n_params, hidden, history, edge_radius, mp_rounds,
                      tuple(param_range), norm_stats)
    rng = rng_stream(seed, "dynamics", "init")
    init_mlp(net.params, net.enc_v, rng)
    init_mlp(net.params, net.enc_e, rng)
    init_affine(net.params, f"{PREFIX}.phi_e", 3 * hidden, hidden, rng)
    init_affine(net.params, f"{PREFIX}.phi_v", 2 * hidden, hidden, rng)
    init_mlp(net.params, net.nonrigid, rng)
    init_mlp(net.params, net.rigid, rng)
    net.params.metadata.update(net.metadata())
    return net


def dynamics_from_store(store: ParamStore) -> DynamicsNet:
    meta = store.metadata
    if meta.get("kind") != "dynamics":
        raise ContractViolation(f"checkpoint is not a dynamics prior (kind={meta.get('kind')!r})")
    stats = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
    return DynamicsNet(store, int(meta["n_params"]), int(meta["hidden"]), int(meta["history"]),
                       float(meta["edge_radius"]), int(meta["mp_rounds"]),
                       tuple(meta["param_range"]), stats)


def message_pass(params: ParamStore, prefix: str, enc_v: MLPSpec, enc_e: MLPSpec,
                 graph: SceneGraph, rounds: int) -> Tensor:
    """Edge messages from (sender, receiver, edge) embeddings, summed at receivers,
    then a vertex update; repeated ``rounds`` times with shared weights."""
    n = graph.n_vertices
    s, r = graph.edges[:, 0], graph.edges[:, 1]
    vert = mlp_forward(params, graph.vertices, enc_v)
    edge = mlp_forward(params, graph.edge_attr, enc_e)
    h = vert
    for _ in range(rounds):
        msg_in = T.concat([T.take(h, s, axis=0), T.take(h, r, axis=0), edge], axis=-1)
        msg = T.relu(affine(params, f"{prefix}.phi_e", msg_in))
        agg = T.segment_sum(msg, r, n)
        h = T.relu(affine(params, f"{prefix}.phi_v", T.concat([h, agg], axis=-1)))
    return h


def spatial_message_pass(net: DynamicsNet, graph: SceneGraph) -> Tensor:
    return message_pass(net.params, PREFIX, net.enc_v, net.enc_e, graph, net.mp_rounds)


def step_graphs(net: DynamicsNet, window, grouping_hard, params_normalized) -> list[SceneGraph]:
    """One graph per history step; graph k sees frames up to k, the missing
    earliest ones padded with the first frame."""
    w = T.as_tensor(window)
    k_hist = net.history
    if w.ndim != 3 or w.shape[0] != k_hist:
        raise ContractViolation(f"history window must have {k_hist} frames, got {w.shape}")
    graphs = []
    for k in range(1, k_hist + 1):
        idx = [max(0, k - k_hist + j) for j in range(k_hist)]
        sub = w if k == k_hist else T.take(w, idx, axis=0)
        graphs.append(build_graph(sub, grouping_hard, params_normalized,
                                  radius=net.edge_radius, history=k_hist))
    return graphs


def quaternion_matrix(quat: Tensor) -> Tensor:
    """Row-major 3x3 rotation entries ``[M, 9]`` of unit quaternions ``[M, 4]`` (w, x, y, z)."""
    w, x, y, z = (quat[:, i] for i in range(4))
    entries = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return T.stack(entries, axis=1)


def predict_step(net: DynamicsNet, graphs: list[SceneGraph], grouping_hard, rigidness) -> Tensor:
    """Next positions ``[N, 3]`` from the per-step graphs of a history window.

    Each object blends its rigid prediction (rotation about its centroid then
    translation) with the per-particle prediction by its rigidness ``q``.
    """
    if len(graphs) != net.history:
        raise ContractViolation(f"predict_step needs {net.history} graphs, got {len(graphs)}")
    grouping = np.asarray(grouping_hard, dtype=np.int64)
    q = T.as_tensor(rigidness).reshape(-1)
    m = q.shape[0]
    counts = T.segment_counts(grouping, m)
    latest = graphs[-1].positions
    emb = T.concat([spatial_message_pass(net, g) for g in graphs], axis=-1)

    nonrigid = latest + mlp_forward(net.params, emb, net.nonrigid)

    pooled = T.segment_mean(emb, grouping, m)
    out = mlp_forward(net.params, pooled, net.rigid)
    trans = out[:, :3]
    quat = out[:, 3:7] + _IDENTITY_QUAT
    quat = quat / T.sqrt(T.tsum(quat * quat, axis=-1, keepdims=True))
    can_rotate = (counts >= 3).astype(np.float64).reshape(-1, 1)
    if not np.all(can_rotate):
        small = [j for j in range(m) if counts[j] < 3 and q.data[j] > 0]
        if small:
            logger.warning("predict_step rigid objects=%s have <3 particles; translation only", small)
        quat = quat * can_rotate + _IDENTITY_QUAT * (1.0 - can_rotate)
    rot = T.take(quaternion_matrix(quat), grouping, axis=0)
    centroid = T.take(T.segment_mean(latest, grouping, m), grouping, axis=0)
    rel = latest - centroid
    rotated = T.stack([
        rot[:, 3 * i] * rel[:, 0] + rot[:, 3 * i + 1] * rel[:, 1] + rot[:, 3 * i + 2] * rel[:, 2]
        for i in range(3)
    ], axis=1)
    rigid = centroid + rotated + T.take(trans, grouping, axis=0)

    qp = T.take(q, grouping, axis=0).reshape(-1, 1)
    return qp * rigid + (1.0 - qp) * nonrigid


def predict_next(net: DynamicsNet, window, grouping_hard, rigidness, params_normalized) -> Tensor:
    graphs = step_graphs(net, window, grouping_hard, params_normalized)
    return predict_step(net, graphs, grouping_hard, rigidness)


# -- rollout -------------------------------------------------------------------------------

@dataclass
class RolloutResult:
    positions: np.ndarray                      # [H, N, 3], physical units
    graphs: list[SceneGraph] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]


def rollout_normalized(net: DynamicsNet, window, grouping_hard, rigidness, params_normalized,
                       horizon: int) -> tuple[list[Tensor], list[SceneGraph]]:
    """Differentiable autoregressive rollout in normalized space."""
    if horizon < 1:
        raise ContractViolation(f"rollout horizon must be >= 1, got {horizon}")
    w0 = T.as_tensor(window)
    frames = [w0[k] for k in range(net.history)]
    preds, latest_graphs = [], []
    for step in range(horizon):
        w = T.stack(frames[-net.history:], axis=0)
        graphs = step_graphs(net, w, grouping_hard, params_normalized)
        nxt = predict_step(net, graphs, grouping_hard, rigidness)
        if not np.all(np.isfinite(nxt.data)):
            raise DivergenceError(step)
        preds.append(nxt)
        latest_graphs.append(graphs[-1])
        frames.append(nxt)
    return preds, latest_graphs


def rollout(net: DynamicsNet, initial_window, grouping_hard, rigidness, params, horizon: int,
            *, norm_stats: NormStats | None = None) -> RolloutResult:
    """Predict ``horizon`` frames from a physical-unit history window."""
    stats = norm_stats or net.norm_stats
    if stats is None:
        raise ContractViolation("rollout needs normalization stats")
    window = normalize(initial_window, stats)
    p = params_to_unit(np.atleast_1d(params), net.param_range)
    preds, graphs = rollout_normalized(net, window, grouping_hard, np.asarray(rigidness, dtype=np.float64),
                                       p, horizon)
    return RolloutResult(denormalize(np.stack([x.data for x in preds]), stats), graphs)


def write_rollout_csv(result: RolloutResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "particle", "x", "y", "z"])
        for step, frame in enumerate(result.positions, start=1):
            for i, (x, y, z) in enumerate(frame):
                w.writerow([step, i, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])
    return path


# -- training ------------------------------------------------------------------------------

def _labels(traj: Trajectory, param_range) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grouping = np.asarray(traj.grouping, dtype=np.int64)
    rigid = np.asarray(traj.rigidness, dtype=np.float64)
    return grouping, rigid, params_to_unit(traj.params, param_range)


def one_step_errors(net: DynamicsNet, trajectories: list[Trajectory], stride: int = 1,
                    *, physical: bool = False) -> tuple[float, float]:
    """Mean squared one-step error of the model and of the copy-last baseline."""
    stats = net.norm_stats
    k = net.history
    model, copy = [], []
    for traj in trajectories:
        x = normalize(traj.positions, stats)
        grouping, rigid, p = _labels(traj, net.param_range)
        for s in training_windows(traj.n_steps, k + 1, stride):
            pred = predict_next(net, x[s:s + k], grouping, rigid, p).data
            truth, last = x[s + k], x[s + k - 1]
            if physical:
                pred, truth, last = (denormalize(a, stats) for a in (pred, truth, last))
            model.append(np.mean((pred - truth) ** 2))
            copy.append(np.mean((last - truth) ** 2))
    if not model:
        raise ContractViolation("no evaluation windows: trajectories shorter than history + 1")
    return float(np.mean(model)), float(np.mean(copy))


def dp_train(manifest: DatasetManifest, config: AppConfig, seed: int,
             metrics_path: str | Path | None = None) -> ParamStore:
    """Supervised one-step training on ground-truth windows (MSE in normalized space)."""
    check_env(manifest, config)
    stats = manifest.stats()
    m, tr = config.model, config.train
    env = manifest.env
    train = list(manifest.trajectories("train"))
    if not train:
        raise ContractViolation("dynamics training needs at least one training trajectory")
    net = init_dynamics(len(train[0].params), hidden=m.hidden, history=m.history,
                        edge_radius=m.edge_radius, mp_rounds=m.mp_rounds,
                        param_range=env.param_range, norm_stats=stats, seed=seed)
    k = m.history
    data = [(normalize(t.positions, stats),) + _labels(t, env.param_range) for t in train]
    samples = [(i, s) for i, t in enumerate(train)
               for s in training_windows(t.n_steps, k + 1, tr.dp_window_stride)]
    if not samples:
        raise ContractViolation("no training windows: trajectories shorter than history + 1")

    opt = Adam(net.params, tr.dp_lr)
    rows: list[tuple[int, float]] = []
    it = 0
    # shuffled once, every epoch walks the same order
    order = rng_stream(seed, "dynamics", "windows").permutation(len(samples))
    t0 = time.perf_counter()
    for epoch in range(tr.dp_epochs):
        epoch_losses = []
        for b in range(0, len(order), tr.dp_batch):
            batch = [samples[j] for j in order[b:b + tr.dp_batch]]
            with Tape():
                losses = []
                for i, s in batch:
                    x, grouping, rigid, p = data[i]
                    pred = predict_next(net, x[s:s + k], grouping, rigid, p)
                    losses.append(T.mse_loss(pred, x[s + k]))
                loss = losses[0] if len(losses) == 1 else T.mean(T.stack(losses))
                grads = T.backward(loss, net.params.trainable())
            opt.step(grads)
            value = loss.item()
            rows.append((it, value))
            epoch_losses.append(value)
            if it % tr.log_every == 0:
                logger.info("dp_train epoch=%s iter=%s loss=%.6f", epoch, it, value)
            it += 1
        logger.info("dp_train epoch=%s mean_loss=%.6f elapsed=%.1fs", epoch, float(np.mean(epoch_losses)),
                    time.perf_counter() - t0)
    write_metrics(rows, metrics_path)

    test = list(manifest.trajectories("test"))
    meta = {
        "env": env.kind.value,
        "config_hash": config_hash(config.model, config.env),
        "seed": seed,
    }
    if test:
        mse, copy = one_step_errors(net, test, tr.dp_window_stride)
        logger.info("dp_train test one_step_mse=%.6g copy_last_mse=%.6g", mse, copy)
        meta.update({"test_mse": mse, "copy_last_mse": copy})
    net.params.metadata.update(meta)
    return net.params
