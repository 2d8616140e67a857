"""Dynamics-guided inference of position refinement, rigidness and physical parameters.

Two networks share the architecture: ``refine_rigid`` carries the refinement and
rigidness heads, ``params`` the parameter head. Both are trained only through
the loss of a frozen dynamics prior rolled out from their outputs.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import AppConfig, config_hash
from .dataset import (
    DatasetManifest,
    NormStats,
    ProposalSequence,
    corrupt_proposals,
    normalize,
    rasterize_sequence,
    training_windows,
)
from .dynamics import (
    DynamicsNet,
    SceneGraph,
    dynamics_from_store,
    message_pass,
    params_to_unit,
    rollout_normalized,
    unit_to_params,
)
from .errors import ContractViolation
from .geometry import neighbor_pairs
from .nn import (
    Adam,
    BiGRUSpec,
    MLPSpec,
    ParamStore,
    bigru_forward,
    init_affine,
    init_bigru,
    init_mlp,
    mlp_forward,
    rng_stream,
)
from .sim import OBJECT_NAMES, PARAM_NAMES, PARAM_UNITS, EnvKind, Trajectory
from .tensor import Tape, Tensor
from .visual import VisualPriorNet, check_env, vp_infer_sliding, write_metrics

logger = logging.getLogger("pinfer")

PREFIX = "inf"
ROLES = ("refine_rigid", "params")
T_RANGE = (1, 20)


@dataclass
class InferenceNet:
    params: ParamStore
    role: str
    n_objects: int
    n_params: int
    hidden: int = 150
    edge_radius: float = 0.08
    mp_rounds: int = 1
    gru_layers: int = 2
    param_range: tuple[float, float] = (0.0, 1.0)

    @property
    def enc_v(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.enc_v", (3 + self.n_objects, h, h, h), output_activation="relu")

    @property
    def enc_e(self) -> MLPSpec:
        h = self.hidden
        return MLPSpec(f"{PREFIX}.enc_e", (5, h, h, h), output_activation="relu")

    @property
    def temporal(self) -> BiGRUSpec:
        return BiGRUSpec(f"{PREFIX}.tau", self.hidden, self.hidden, self.gru_layers)

    @property
    def head_x(self) -> MLPSpec:
        return MLPSpec(f"{PREFIX}.head_x", (2 * self.hidden, self.hidden, 3))

    @property
    def head_q(self) -> MLPSpec:
        return MLPSpec(f"{PREFIX}.head_q", (2 * self.hidden, self.hidden, 1), output_activation="sigmoid")

    @property
    def head_p(self) -> MLPSpec:
        return MLPSpec(f"{PREFIX}.head_p", (2 * self.hidden, self.hidden, self.n_params),
                       output_activation="tanh")

    def metadata(self) -> dict:
        return {
            "kind": "inference",
            "role": self.role,
            "n_objects": self.n_objects,
            "n_params": self.n_params,
            "hidden": self.hidden,
            "edge_radius": self.edge_radius,
            "mp_rounds": self.mp_rounds,
            "gru_layers": self.gru_layers,
            "param_range": list(self.param_range),
        }


def init_inference(role: str, n_objects: int, n_params: int, *, hidden: int = 150,
                   edge_radius: float = 0.08, mp_rounds: int = 1, gru_layers: int = 2,
                   param_range=(0.0, 1.0), seed: int = 0) -> InferenceNet:
    if role not in ROLES:
        raise ContractViolation(f"unknown inference role {role!r}; expected one of {ROLES}")
    net = InferenceNet(ParamStore(), role, n_objects, n_params, hidden, edge_radius, mp_rounds,
                       gru_layers, tuple(param_range))
    rng = rng_stream(seed, "inference", role, "init")
    init_mlp(net.params, net.enc_v, rng)
    init_mlp(net.params, net.enc_e, rng)
    init_affine(net.params, f"{PREFIX}.phi_e", 3 * hidden, hidden, rng)
    init_affine(net.params, f"{PREFIX}.phi_v", 2 * hidden, hidden, rng)
    init_bigru(net.params, net.temporal, rng)
    if role == "refine_rigid":
        init_mlp(net.params, net.head_x, rng)
        init_mlp(net.params, net.head_q, rng)
    else:
        init_mlp(net.params, net.head_p, rng)
    net.params.metadata.update(net.metadata())
    return net


def inference_from_store(store: ParamStore) -> InferenceNet:
    meta = store.metadata
    if meta.get("kind") != "inference":
        raise ContractViolation(f"checkpoint is not an inference net (kind={meta.get('kind')!r})")
    return InferenceNet(store, meta["role"], int(meta["n_objects"]), int(meta["n_params"]),
                        int(meta["hidden"]), float(meta["edge_radius"]), int(meta["mp_rounds"]),
                        int(meta["gru_layers"]), tuple(meta["param_range"]))


# -- forward --------------------------------------------------------------------------------

def proposal_graph(positions, grouping_soft, grouping_hard, radius: float) -> SceneGraph:
    x = T.as_tensor(positions)
    vertices = T.concat([x, T.as_tensor(grouping_soft)], axis=-1)
    edges = neighbor_pairs(x.data, radius)
    s, r = edges[:, 0], edges[:, 1]
    same = (grouping_hard[s] == grouping_hard[r]).astype(np.float64).reshape(-1, 1)
    disp = T.take(x, r, axis=0) - T.take(x, s, axis=0)
    dist = T.sqrt(T.tsum(disp * disp, axis=-1, keepdims=True) + 1e-12)
    return SceneGraph(vertices, edges, T.concat([Tensor(same), disp, dist], axis=-1))


def st_message_pass(net: InferenceNet, proposals: ProposalSequence) -> Tensor:
    """Per-step spatial message passing, then a per-particle bi-GRU over time: ``[T, N, 2h]``."""
    if proposals.n_objects != net.n_objects:
        raise ContractViolation(f"proposals have {proposals.n_objects} objects, net expects {net.n_objects}")
    hard = proposals.hard_grouping()
    steps = []
    for t in range(proposals.n_steps):
        graph = proposal_graph(proposals.positions[t], proposals.grouping[t], hard, net.edge_radius)
        steps.append(message_pass(net.params, PREFIX, net.enc_v, net.enc_e, graph, net.mp_rounds))
    return bigru_forward(net.params, T.stack(steps, axis=0), net.temporal)


def infer_refine_rigid(net: InferenceNet, u: Tensor, grouping_hard) -> tuple[Tensor, Tensor, Tensor]:
    """Refinement ``[T, N, 3]``, per-step rigidness ``[T, M]`` and its time average ``[M]``."""
    grouping = np.asarray(grouping_hard, dtype=np.int64)
    delta = mlp_forward(net.params, u, net.head_x)
    per_object = T.segment_mean(T.transpose(u, (1, 0, 2)), grouping, net.n_objects)
    w = T.transpose(per_object, (1, 0, 2))
    q_t = mlp_forward(net.params, w, net.head_q).reshape(u.shape[0], net.n_objects)
    return delta, q_t, T.mean(q_t, axis=0)


def infer_params(net: InferenceNet, u: Tensor) -> tuple[Tensor, Tensor]:
    """Physical parameter estimate and its tanh-space value, from embeddings pooled
    over every particle and step."""
    if u.size == 0:
        raise ContractViolation("infer_params needs a non-empty embedding")
    pooled = T.mean(u.reshape(-1, u.shape[-1]), axis=0, keepdims=True)
    y = mlp_forward(net.params, pooled, net.head_p).reshape(net.n_params)
    return unit_to_params(y, net.param_range), y


@dataclass
class InferenceNets:
    refine: InferenceNet
    params: InferenceNet


@dataclass
class InferredProperties:
    delta: np.ndarray          # [T, N, 3], normalized
    refined: np.ndarray        # [T, N, 3], normalized
    rigidness_t: np.ndarray    # [T, M]
    rigidness: np.ndarray      # [M]
    params: np.ndarray         # [n_params], physical units
    grouping: np.ndarray       # [N], hard labels of the proposals

    def rigid_labels(self, threshold: float = 0.5) -> np.ndarray:
        """1.0 for objects whose rigid probability is above ``threshold``, else 0.0."""
        return (self.rigidness > threshold).astype(np.float64)


def infer(nets: InferenceNets, proposals: ProposalSequence) -> InferredProperties:
    n_steps = proposals.n_steps
    if not T_RANGE[0] <= n_steps <= T_RANGE[1]:
        logger.warning("infer sequence length T=%s outside evaluated range %s", n_steps, T_RANGE)
    hard = proposals.hard_grouping()
    u_ref = st_message_pass(nets.refine, proposals)
    delta, q_t, q = infer_refine_rigid(nets.refine, u_ref, hard)
    p_hat, _ = infer_params(nets.params, st_message_pass(nets.params, proposals))
    return InferredProperties(
        delta=delta.data.copy(),
        refined=proposals.positions + delta.data,
        rigidness_t=q_t.data.copy(),
        rigidness=q.data.copy(),
        params=p_hat.data.copy(),
        grouping=hard,
    )


def properties_summary(props: InferredProperties, env: EnvKind | str, rigid_threshold: float = 0.5) -> dict:
    env = EnvKind(env)
    labels = props.rigid_labels(rigid_threshold)
    names = OBJECT_NAMES.get(env) or tuple(f"object{j}" for j in range(len(props.rigidness)))
    return {
        "env": env.value,
        "objects": [
            {"name": names[j] if j < len(names) else f"object{j}",
             "rigid_prob": float(props.rigidness[j]),
             "rigid": bool(labels[j])}
            for j in range(len(props.rigidness))
        ],
        "params": [{"name": PARAM_NAMES[env], "value": float(v), "unit": PARAM_UNITS[env]}
                   for v in props.params],
        "refinement_norm": [float(v) for v in np.linalg.norm(props.delta, axis=-1).mean(axis=1)],
    }


def write_properties(props: InferredProperties, env: EnvKind | str, path: str | Path,
                     rigid_threshold: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(properties_summary(props, env, rigid_threshold), indent=2), encoding="utf-8")
    return path


# -- proposals for training and evaluation -----------------------------------------------------

def proposals_for(traj: Trajectory, stats: NormStats, *, noise: float, flip_rate: float, seed: int,
                  visual: VisualPriorNet | None = None) -> ProposalSequence:
    if visual is None:
        return corrupt_proposals(traj, noise, flip_rate, seed, norm_stats=stats)
    frames = rasterize_sequence(traj.positions, stats, visual.grid_size)
    return vp_infer_sliding(visual, frames)


# -- training -----------------------------------------------------------------------------------

def check_dynamics(dyn: DynamicsNet, manifest: DatasetManifest) -> None:
    env = dyn.params.metadata.get("env")
    if env is not None and env != manifest.env_kind.value:
        raise ContractViolation(f"dynamics checkpoint was trained on {env!r}, dataset is {manifest.env_kind.value!r}")
    if dyn.norm_stats is None or not dyn.norm_stats.matches(manifest.stats()):
        raise ContractViolation("dynamics checkpoint normalization stats do not match the dataset")


def inference_loss(net: InferenceNet, dyn: DynamicsNet, window: ProposalSequence, future, *,
                   true_window, true_rigidness, true_params_unit) -> Tensor:
    """Mean L1 between the frozen prior's rollout and the true future frames.

    The net's own target quantities flow into the rollout; the complementary ones
    come from ground truth.
    """
    future = np.asarray(future, dtype=np.float64)
    k = dyn.history
    hard = window.hard_grouping()
    u = st_message_pass(net, window)
    if net.role == "refine_rigid":
        delta, _, q = infer_refine_rigid(net, u, hard)
        seed_frames = T.as_tensor(window.positions[-k:]) + delta[-k:]
        preds, _ = rollout_normalized(dyn, seed_frames, hard, q, true_params_unit, len(future))
    else:
        _, y = infer_params(net, u)
        seed_frames = np.asarray(true_window, dtype=np.float64)[-k:]
        preds, _ = rollout_normalized(dyn, seed_frames, hard, np.asarray(true_rigidness, dtype=np.float64),
                                      y, len(future))
    return T.l1_loss(T.stack(preds, axis=0), future)


def inf_train(manifest: DatasetManifest, dp_store: ParamStore, config: AppConfig, target: str,
              seed: int, metrics_path: str | Path | None = None,
              visual: VisualPriorNet | None = None) -> ParamStore:
    check_env(manifest, config)
    if target not in ROLES:
        raise ContractViolation(f"unknown inference target {target!r}; expected one of {ROLES}")
    dyn = dynamics_from_store(dp_store)
    check_dynamics(dyn, manifest)
    dyn.params.freeze()
    stats = dyn.norm_stats
    m, tr = config.model, config.train
    env = manifest.env
    train = list(manifest.trajectories("train"))
    if not train:
        raise ContractViolation("inference training needs at least one training trajectory")
    net = init_inference(target, train[0].n_objects, len(train[0].params), hidden=m.hidden,
                         edge_radius=m.edge_radius, mp_rounds=m.mp_rounds, gru_layers=m.gru_layers,
                         param_range=env.param_range, seed=seed)
    t_in, h = m.inference_window, m.rollout_train_steps
    sim_seeds = rng_stream(seed, "inference", "proposals").integers(0, 2 ** 63 - 1, size=len(train))
    data = []
    for traj, s in zip(train, sim_seeds):
        props = proposals_for(traj, stats, noise=tr.proposal_noise, flip_rate=tr.flip_rate,
                              seed=int(s), visual=visual)
        data.append((props, normalize(traj.positions, stats), np.asarray(traj.rigidness, dtype=np.float64),
                     params_to_unit(traj.params, env.param_range)))
    samples = [(i, s) for i, t in enumerate(train)
               for s in training_windows(t.n_steps, t_in + h, tr.inf_window_stride)]
    if not samples:
        raise ContractViolation(f"no training windows: trajectories shorter than {t_in + h} frames")

    opt = Adam(net.params, tr.inf_lr)
    rows: list[tuple[int, float]] = []
    it = 0
    order = rng_stream(seed, "inference", target, "windows").permutation(len(samples))
    t0 = time.perf_counter()
    for epoch in range(tr.inf_epochs):
        epoch_losses = []
        for b in range(0, len(order), tr.inf_batch):
            batch = [samples[j] for j in order[b:b + tr.inf_batch]]
            with Tape():
                losses = []
                for i, s in batch:
                    props, truth, rigid, p = data[i]
                    losses.append(inference_loss(
                        net, dyn, props.window(s, t_in), truth[s + t_in:s + t_in + h],
                        true_window=truth[s:s + t_in], true_rigidness=rigid, true_params_unit=p,
                    ))
                loss = losses[0] if len(losses) == 1 else T.mean(T.stack(losses))
                grads = T.backward(loss, net.params.trainable())
            opt.step(grads)
            value = loss.item()
            rows.append((it, value))
            epoch_losses.append(value)
            if it % tr.log_every == 0:
                logger.info("inf_train target=%s epoch=%s iter=%s loss=%.6f", target, epoch, it, value)
            it += 1
        logger.info("inf_train target=%s epoch=%s mean_loss=%.6f elapsed=%.1fs", target, epoch,
                    float(np.mean(epoch_losses)), time.perf_counter() - t0)
    write_metrics(rows, metrics_path)
    net.params.metadata.update({
        "env": env.kind.value,
        "norm_stats": stats.to_dict(),
        "config_hash": config_hash(config.model, config.env),
        "dynamics_config_hash": dp_store.metadata.get("config_hash", ""),
        "seed": seed,
    })
    return net.params
