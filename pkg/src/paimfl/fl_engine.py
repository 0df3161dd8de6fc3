"""Cloud / edge / end protocol and the synchronous round loop.

Every participant (end clients and the edge) keeps a running estimate of
the global gradient, ``global_grad_accum``, built by summing every global
update it has received. Each round a participant

1. steps its weights along ``D + accum`` where ``D`` is the received
   update, optionally blended with its own previous record,
2. computes its local gradient ``G`` (mean over ``local_steps`` minibatch
   steps taken from a scratch copy of the weights),
3. uploads ``G - accum`` through the privacy pipeline.

The edge averages the end uploads with its own, sends the result to the
cloud, and pushes the cloud's answer back down (through the pipeline again
for PA-iMFL). All transport is serialized with the grad_core wire layouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grad_core import (GradientVector, SparseUpdate, as_array, decode_update, densify,
                        encode_update, sparsify)
from .model_data import (DatasetShard, MlpModel, forward_backward, load_mnist, param_count,
                         partition_noniid, synthetic_gaussian)
from .privacy_ops import PrivacyParams, apply_pipeline

log = logging.getLogger(__name__)

LINKS = ("up_end_edge", "up_edge_cloud", "down_cloud_edge", "down_edge_end")


class RoundError(RuntimeError):
    """A stage failed; ``round`` says where."""

    category = "round"

    def __init__(self, round, msg):
        super().__init__(f"round {round}: {msg}")
        self.round = round


@dataclass
class TrainSettings:
    """How a participant turns received updates into weights and gradients.

    ``pipeline`` is None when privacy operations are bypassed.
    """

    eta: float = 0.01
    local_lr: float | None = None
    local_steps: int = 1
    momentum: float = 0.0
    drift_correction: bool = False
    compensation: bool = True
    pipeline: PrivacyParams | None = None

    @property
    def beta(self):
        return self.pipeline.beta if self.pipeline is not None else 0.9


@dataclass
class ClientState:
    weights: np.ndarray
    record: GradientVector
    global_grad_accum: GradientVector
    momentum_update: GradientVector
    client_id: int
    seed: int
    layer_dims: tuple = ()
    rng: np.random.Generator = field(default=None, repr=False)
    last_local: GradientVector = None
    velocity: np.ndarray = None
    last_loss: float = float("nan")

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        d = as_array(self.record).size
        if self.last_local is None:
            self.last_local = GradientVector.zeros(d)
        if self.velocity is None:
            self.velocity = np.zeros(d)

    @classmethod
    def fresh(cls, client_id, seed, layer_dims, d=None):
        d = param_count(layer_dims) if d is None else d
        z = GradientVector.zeros(d)
        return cls(np.zeros(d), z, z, z, client_id, int(seed), tuple(layer_dims))

    @property
    def d(self):
        return self.weights.shape[0]

    def model(self) -> MlpModel:
        return MlpModel(self.layer_dims, self.weights)


@dataclass
class EdgeState(ClientState):
    received_updates: list = field(default_factory=list)


@dataclass
class RoundResult:
    round: int
    global_update: SparseUpdate
    uplink_bytes: int
    downlink_bytes: int
    train_loss: float
    test_accuracy: float
    up_end_edge: int = 0
    up_edge_cloud: int = 0
    down_cloud_edge: int = 0
    down_edge_end: int = 0


# -- aggregation ---------------------------------------------------------------

def compensate(record, global_update, beta: float) -> GradientVector:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta ∈ [0,1] required, got {beta}")
    r, g = as_array(record), as_array(global_update)
    if r.shape != g.shape:
        raise ValueError(f"dimension mismatch: record d={r.size}, update d={g.size}")
    if beta == 0.0:
        return GradientVector(g)
    if beta == 1.0:
        return GradientVector(r)
    return GradientVector(beta * r + (1.0 - beta) * g)


def edge_aggregate(end_updates: Sequence[SparseUpdate], edge_update) -> GradientVector:
    """(sum of end updates + edge update) / (m + 1)."""
    e = as_array(edge_update)
    total = e.copy()
    for i, u in enumerate(end_updates):
        if u.d != e.size:
            raise ValueError(f"end update {i} has d={u.d}, edge update has d={e.size}")
        total[u.indices] += u.entries
    return GradientVector(total / (len(end_updates) + 1))


def cloud_aggregate(edge_uplinks: Sequence[SparseUpdate]) -> GradientVector:
    if not edge_uplinks:
        raise ValueError("cloud_aggregate needs at least one edge uplink")
    d = edge_uplinks[0].d
    total = np.zeros(d)
    for i, u in enumerate(edge_uplinks):
        if u.d != d:
            raise ValueError(f"uplink {i} has d={u.d}, expected {d}")
        total[u.indices] += u.entries
    return GradientVector(total / len(edge_uplinks))


# -- participant steps -------------------------------------------------------

def _apply_received(state: ClientState, global_update, round: int, settings: TrainSettings, eta: float):
    g = as_array(global_update)
    if g.size != state.d:
        raise ValueError(f"global update has d={g.size}, model has d={state.d}")
    if round == 0:
        # round 0 carries the initial model itself
        state.weights = g.copy()
        return
    D = compensate(state.record, g, settings.beta) if settings.compensation else GradientVector(g)
    state.momentum_update = D
    step = D.values + state.global_grad_accum.values
    state.velocity = settings.momentum * state.velocity + step
    state.weights = state.weights - eta * state.velocity
    state.global_grad_accum = GradientVector(state.global_grad_accum.values + g)
    if not np.all(np.isfinite(state.weights)):
        raise FloatingPointError(f"client {state.client_id}: non-finite weights")


def _local_gradient(state: ClientState, batches, round: int, settings: TrainSettings):
    """Mean raw gradient along ``local_steps`` SGD steps from the current weights."""
    if isinstance(batches, (DatasetShard, tuple)):
        batches = [batches]
    batches = list(batches)
    if not batches:
        raise ValueError("no training batch supplied")
    lr = settings.local_lr if settings.local_lr is not None else settings.eta
    model = MlpModel(state.layer_dims, state.weights.copy())
    correction = None
    if settings.drift_correction and round > 0:
        correction = state.global_grad_accum.values - state.last_local.values
    G = np.zeros(state.d)
    losses = []
    for i, b in enumerate(batches):
        loss, g = forward_backward(model, b)
        losses.append(loss)
        G += g.values
        if i + 1 < len(batches):
            step = g.values if correction is None else g.values + correction
            model.weights -= lr * step
    return float(np.mean(losses)), G / len(batches)


def _privatize(delta: GradientVector, params: PrivacyParams | None, round: int, rng) -> SparseUpdate:
    if params is None:
        return sparsify(delta)
    out, _ = apply_pipeline(delta, params, round, rng)
    return sparsify(out)


def _train_and_record(state, global_update, round, settings, batch, eta):
    _apply_received(state, global_update, round, settings, eta)
    loss, G = _local_gradient(state, batch, round, settings)
    delta = GradientVector(G - state.global_grad_accum.values)
    state.record = delta
    state.last_local = GradientVector(G)
    return loss, delta


def end_local_round(state: ClientState, global_update, round: int, params: PrivacyParams | None,
                    batch, settings: TrainSettings | None = None, eta: float | None = None):
    """One end-device round. Returns ``(wire update, state)``; ``state`` is mutated.

    ``params=None`` bypasses the privacy pipeline. ``batch`` may be a single
    batch or a list of ``local_steps`` batches.
    """
    if round < 0:
        raise ValueError(f"round must be >= 0, got {round}")
    settings = settings or TrainSettings(pipeline=params)
    eta = settings.eta if eta is None else eta
    loss, delta = _train_and_record(state, global_update, round, settings, batch, eta)
    state.last_loss = loss
    return _privatize(delta, params, round, state.rng), state


def edge_round(state: EdgeState, end_updates: Sequence[SparseUpdate], global_update, round: int,
               params: PrivacyParams | None, batch, settings: TrainSettings | None = None,
               eta: float | None = None, cloud: Callable | None = None,
               downlink_params: PrivacyParams | None = None):
    """One edge round: train, aggregate with the end uploads, upload, fetch, broadcast.

    ``cloud`` maps the uplink to the cloud's global update (defaults to an
    in-process ``cloud_aggregate``). ``downlink_params`` controls the
    broadcast pipeline; it defaults to ``params`` (bidirectional).
    Returns ``(uplink, broadcast, state)``.
    """
    if round < 0:
        raise ValueError(f"round must be >= 0, got {round}")
    settings = settings or TrainSettings(pipeline=params)
    eta = settings.eta if eta is None else eta
    down = params if downlink_params is None else downlink_params
    loss, delta = _train_and_record(state, global_update, round, settings, batch, eta)
    state.last_loss = loss
    state.received_updates = list(end_updates)
    agg = edge_aggregate(end_updates, delta)
    uplink = _privatize(agg, params, round, state.rng)
    if cloud is None:
        global_next = cloud_aggregate([uplink])
    else:
        global_next = cloud(uplink)
    broadcast = _privatize(GradientVector(as_array(global_next)), down, round, state.rng)
    return uplink, broadcast, state


# -- orchestration -----------------------------------------------------------

def scheme_settings(config) -> tuple[TrainSettings, PrivacyParams | None, PrivacyParams | None, bool]:
    """(settings, uplink params, downlink params, dense downlink) for ``config.scheme``."""
    base = dict(eta=config.eta, local_lr=config.local_lr, local_steps=config.local_steps,
                momentum=config.momentum, drift_correction=config.drift_correction)
    params = config.privacy
    if config.scheme == "pa-imfl":
        return TrainSettings(compensation=True, pipeline=params, **base), params, params, False
    if config.scheme == "unidirectional-sample-baseline":
        up = params.with_(t=0)
        return TrainSettings(compensation=True, pipeline=up, **base), up, None, True
    if config.scheme == "no-defense-fedavg":
        return TrainSettings(compensation=False, pipeline=None, **base), None, None, True
    raise ValueError(f"unknown scheme {config.scheme!r}")


def load_datasets(config):
    """(train, test) shards for ``config.dataset``."""
    if config.dataset == "mnist":
        train, test = load_mnist(config.data_dir)
        if train.feature_dim != config.layer_dims[0] or config.layer_dims[-1] != 10:
            raise ValueError(f"layer_dims {config.layer_dims} do not fit MNIST (784 in, 10 out)")
    else:
        n_cls = config.synthetic_classes
        if config.layer_dims[-1] != n_cls:
            raise ValueError(f"layer_dims ends in {config.layer_dims[-1]}, dataset has {n_cls} classes")
        data = synthetic_gaussian(n_cls, config.synthetic_per_class, config.layer_dims[0],
                                  seed=config.master_seed, separation=config.synthetic_separation)
        order = np.random.default_rng([config.master_seed, 1]).permutation(len(data))
        cut = int(0.8 * len(data))
        train, test = data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:]))
    if config.train_limit is not None:
        train = train.subset(slice(0, config.train_limit))
    if config.test_limit is not None:
        test = test.subset(slice(0, config.test_limit))
    return train, test


def _partition(train: DatasetShard, parties: int, classes_per_client: int, seed):
    n_cls = int(np.unique(train.labels).size)
    # too few parties for full class coverage: widen each party's class set
    cpc = min(n_cls, max(classes_per_client, -(-n_cls // parties)))
    return partition_noniid(train, parties, cpc, seed)


@dataclass
class Experiment:
    """Everything ``run_experiment`` builds before the first round."""

    config: object
    clients: list
    edge: EdgeState
    shards: list
    test: DatasetShard
    w0: np.ndarray


def setup_experiment(config, train=None, test=None) -> Experiment:
    if train is None or test is None:
        train, test = load_datasets(config)
    m = config.clients
    ss = np.random.SeedSequence(config.master_seed)
    init_ss, part_ss, *party_ss = ss.spawn(2 + m + 1)
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in party_ss]
    w0 = MlpModel.init(config.layer_dims, seed=init_ss).weights
    shards = _partition(train, m + 1, config.classes_per_client, part_ss)
    d = w0.size
    clients = [ClientState.fresh(i, seeds[i], config.layer_dims, d) for i in range(m)]
    edge = EdgeState.fresh(m, seeds[m], config.layer_dims, d)
    return Experiment(config, clients, edge, shards, test, w0)


def _batch_rng(seed):
    # batches get their own stream so schemes draw identical minibatches
    return np.random.default_rng([seed, 0xB47C])


def run_experiment(config, order: Sequence[int] | None = None, train=None, test=None,
                   ledger=None, on_round: Callable | None = None) -> list[RoundResult]:
    """Run ``config.rounds`` synchronous rounds and return one RoundResult each.

    ``order`` fixes the end-client execution order (default from
    ``config.client_order``); results do not depend on it. ``on_round`` is
    called as ``on_round(result, experiment)`` after every round.
    """
    if config.rounds == 0:
        return []
    exp = setup_experiment(config, train, test)
    settings, up_params, down_params, dense_down = scheme_settings(config)
    m = config.clients
    if order is None:
        order = list(range(m)) if config.client_order == "forward" else list(range(m))[::-1]
    if sorted(order) != list(range(m)):
        raise ValueError(f"order must be a permutation of range({m})")
    streams = [s.batches(config.batch_size, _batch_rng(p.seed))
               for s, p in zip(exp.shards, exp.clients + [exp.edge])]

    def draw(i):
        return [next(streams[i]) for _ in range(config.local_steps)]

    results = []
    incoming = exp.w0
    for r in range(config.rounds):
        eta_r = config.eta / (1.0 + config.decay * r)
        nbytes = dict.fromkeys(LINKS, 0)
        try:
            uploads = {}
            for i in order:
                u, _ = end_local_round(exp.clients[i], incoming, r, up_params, draw(i),
                                       settings, eta_r)
                wire = encode_update(u)
                nbytes["up_end_edge"] += len(wire)
                uploads[i] = decode_update(wire)
            received = [uploads[i] for i in range(m)]

            def cloud(uplink):
                wire = encode_update(uplink)
                nbytes["up_edge_cloud"] += len(wire)
                agg = cloud_aggregate([decode_update(wire)])
                back = encode_update(sparsify(agg), dense_downlink=dense_down)
                nbytes["down_cloud_edge"] += len(back)
                return densify(decode_update(back))

            _, broadcast, _ = edge_round(exp.edge, received, incoming, r, up_params, draw(m),
                                         settings, eta_r, cloud=cloud, downlink_params=down_params)
            wire = encode_update(broadcast, dense_downlink=dense_down)
            nbytes["down_edge_end"] += len(wire) * m
            delivered = decode_update(wire)
        except (ValueError, FloatingPointError) as exc:
            raise RoundError(r, str(exc)) from exc
        incoming = densify(delivered).values
        losses = [p.last_loss for p in exp.clients + [exp.edge]]
        mean_w = np.mean([p.weights for p in exp.clients + [exp.edge]], axis=0)
        acc = MlpModel(config.layer_dims, mean_w).accuracy(exp.test)
        res = RoundResult(r, delivered, nbytes["up_end_edge"] + nbytes["up_edge_cloud"],
                          nbytes["down_cloud_edge"] + nbytes["down_edge_end"],
                          float(np.mean(losses)), acc, **nbytes)
        if ledger is not None:
            ledger.record_round(res)
        if on_round is not None:
            on_round(res, exp)
        log.debug("round %d loss %.4f acc %.4f", r, res.train_loss, acc)
        results.append(res)
    return results
