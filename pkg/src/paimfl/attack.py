"""Honest-but-curious reconstruction of private inputs from intercepted updates.

Two attackers are provided:

* ``analytic_fc_invert`` reads the input straight out of a fully connected
  first layer (weight-gradient row divided by its bias-gradient entry).
* ``iterative_dra`` matches the gradient of a dummy input against the
  intercepted update by gradient descent on the dummy input, label known.

The gradient of the matching objective with respect to the dummy input is
computed by differentiating the MLP backward pass by hand.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .grad_core import GradientVector, SparseUpdate, as_array, densify
from .model_data import MlpModel, softmax


class NonInvertibleGradient(ValueError):
    """Every first-layer bias gradient is zero; nothing to divide by."""


@dataclass
class AttackConfig:
    optimizer_steps: int = 2000
    step_size: float = 10.0
    distance: str = "cosine"
    init_seed: int = 0
    # dummy input starts as N(init_mean, init_std^2): mid-grey for [0, 1] pixels
    init_mean: float = 0.5
    init_std: float = 0.1
    known_label: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.distance not in ("squared-l2", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.optimizer_steps < 0:
            raise ValueError("optimizer_steps must be >= 0")


@dataclass
class AttackResult:
    reconstruction: np.ndarray
    mse: float
    iterations: int
    mode: str
    target_client: int = -1
    objective: float = float("nan")


def mse(x, x_prime) -> float:
    """Mean squared pixel difference."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(x_prime, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


def _score(target, rec):
    return float("nan") if target is None else mse(target, rec)


# -- analytic inversion ------------------------------------------------------

def analytic_fc_invert(grad, label: int, model_shape, target=None,
                       target_client: int = -1) -> AttackResult:
    """Recover the input from the first fully connected layer's gradient.

    For one sample, row j of dL/dW1 is ``dL/db1[j] * x``; rows are combined
    by least squares over all rows with a nonzero bias gradient. ``label`` is
    accepted for interface symmetry; the identity does not need it.
    """
    v = as_array(grad)
    dims = tuple(model_shape.layer_dims if isinstance(model_shape, MlpModel) else model_shape)
    n_in, n_hid = dims[0], dims[1]
    if v.size < n_in * n_hid + n_hid:
        raise ValueError("gradient shorter than the first layer")
    gW = v[:n_in * n_hid].reshape(n_hid, n_in)
    gb = v[n_in * n_hid:n_in * n_hid + n_hid]
    live = gb != 0
    if not np.any(live):
        raise NonInvertibleGradient("all first-layer bias gradients are zero")
    rec = (gb[live] @ gW[live]) / float(gb[live] @ gb[live])
    return AttackResult(rec, _score(target, rec), 0, "analytic", target_client)


# -- gradient matching -------------------------------------------------------

def _single_sample_grad(model: MlpModel, x, y):
    """Per-layer gradients for one sample plus everything the reverse pass needs."""
    layers = model.layers()
    acts, pre = [x], []
    h = x
    for i, (W, b) in enumerate(layers):
        z = W @ h + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    p = softmax(acts[-1][None, :])[0]
    deltas = [None] * len(layers)
    d = p.copy()
    d[y] -= 1.0
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = d
        if i:
            d = (layers[i][0].T @ d) * (pre[i - 1] > 0)
    flat = np.concatenate([np.concatenate([np.outer(deltas[i], acts[i]).ravel(), deltas[i]])
                           for i in range(len(layers))])
    return flat, (layers, acts, pre, deltas, p)


def _input_grad(model: MlpModel, cache, adj_flat):
    """Back-propagate d(objective)/d(gradient) to d(objective)/d(input)."""
    layers, acts, pre, deltas, p = cache
    L = len(layers)
    adj_layers = model.layers(adj_flat)
    a_bar = [np.zeros_like(a) for a in acts]
    d_bar = None
    # gradients were formed from deltas[0] (last computed) up to deltas[L-1]
    for i in range(L):
        GW, gb = adj_layers[i]
        db = GW @ acts[i] + gb
        a_bar[i] += GW.T @ deltas[i]
        if i:
            # deltas[i-1] = (W_i^T deltas[i]) * mask_{i-1}
            db += layers[i][0] @ (d_bar * (pre[i - 1] > 0))
        d_bar = db
    # deltas[L-1] = softmax(z_L) - onehot
    z_bar = p * (d_bar - p @ d_bar)
    for i in range(L - 1, -1, -1):
        a_bar[i] += layers[i][0].T @ z_bar
        if i:
            z_bar = a_bar[i] * (pre[i - 1] > 0)
    return a_bar[0]


def matching_objective(model: MlpModel, x, y: int, target: np.ndarray, distance="squared-l2"):
    """Distance between the dummy gradient at ``x`` and ``target``, and its input gradient.

    The squared distance is divided by ``||target||^2`` so one step size
    fits updates of any scale.
    """
    g, cache = _single_sample_grad(model, x, y)
    if distance == "squared-l2":
        scale = float(target @ target) or 1.0
        r = g - target
        J = float(r @ r) / scale
        adj = 2.0 * r / scale
    else:
        ng, nt = np.linalg.norm(g), np.linalg.norm(target)
        if ng == 0 or nt == 0:
            return 1.0, np.zeros_like(x)
        c = float(g @ target) / (ng * nt)
        J = 1.0 - c
        adj = -(target / (ng * nt) - c * g / (ng * ng))
    return J, _input_grad(model, cache, adj)


def iterative_dra(intercepted, victim_model: MlpModel, true_label: int,
                  config: AttackConfig | None = None, target=None,
                  target_client: int = -1) -> AttackResult:
    """Gradient-descent gradient matching from a seeded Gaussian start.

    The intercepted update is densified with zeros; the best iterate by
    objective value is returned.
    """
    config = config or AttackConfig()
    if isinstance(intercepted, SparseUpdate):
        t = densify(intercepted).values
    else:
        t = as_array(intercepted)
    if t.size != victim_model.d:
        raise ValueError(f"intercepted update has d={t.size}, model has d={victim_model.d}")
    # private copy: the attack never touches the victim's weights
    model = MlpModel(victim_model.layer_dims, victim_model.weights.copy())
    rng = np.random.default_rng(config.init_seed)
    x = rng.normal(config.init_mean, config.init_std, size=model.layer_dims[0])
    with np.errstate(over="ignore", invalid="ignore"):
        best_x, best_J, steps = _descend(model, x, true_label, t, config)
    return AttackResult(best_x, _score(target, best_x), steps, "iterative",
                        target_client, best_J)


def _descend(model, x, true_label, t, config):
    best_x, best_J = x.copy(), float("inf")
    steps = 0
    for steps in range(1, config.optimizer_steps + 1):
        J, gx = matching_objective(model, x, true_label, t, config.distance)
        if not np.isfinite(J) or not np.all(np.isfinite(gx)):
            steps -= 1
            break
        if J < best_J:
            best_J, best_x = J, x.copy()
        x = x - config.step_size * gx
    else:
        if config.optimizer_steps:
            J, _ = matching_objective(model, x, true_label, t, config.distance)
            if np.isfinite(J) and J < best_J:
                best_J, best_x = J, x.copy()
    return best_x, best_J, steps


# -- reporting ---------------------------------------------------------------

REPORT_COLUMNS = ("condition", "gamma", "epsilon", "t", "n_targets", "mean_mse", "std_mse", "mode")


@dataclass
class AttackRun:
    condition: str
    gamma: float
    epsilon: float
    t: int
    results: list


@dataclass
class DefenseReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r[c] for c in REPORT_COLUMNS])
        return buf.getvalue()

    def row(self, condition: str) -> dict:
        for r in self.rows:
            if r["condition"] == condition:
                return r
        raise KeyError(condition)


def defense_report(runs) -> DefenseReport:
    """Mean and (population) std of MSE per condition."""
    rows = []
    for run in runs:
        if not run.results:
            raise ValueError(f"condition {run.condition!r} has no completed attacks")
        scores = np.array([r.mse for r in run.results])
        modes = sorted({r.mode for r in run.results})
        rows.append(dict(condition=run.condition, gamma=run.gamma, epsilon=run.epsilon,
                         t=run.t, n_targets=len(scores), mean_mse=float(scores.mean()),
                         std_mse=float(scores.std()), mode="+".join(modes)))
    return DefenseReport(rows)


# -- experiment ----------------------------------------------------------------

def pick_targets(shard, n: int, seed=0):
    """``n`` distinct sample indices from ``shard`` (seeded)."""
    if n > len(shard):
        raise ValueError(f"asked for {n} targets, shard holds {len(shard)}")
    return np.sort(np.random.default_rng(seed).choice(len(shard), size=n, replace=False))


def attack_condition(config, params, exp=None) -> list:
    """Per-target results for one condition (``params=None``: undefended).

    Each target is uploaded exactly as end client 0 would at round 0 with
    a batch of one, serialized, and decoded on the eavesdropper's side.
    """
    from .fl_engine import ClientState, TrainSettings, end_local_round, setup_experiment
    from .grad_core import decode_update, encode_update

    exp = exp or setup_experiment(config)
    victim = exp.shards[0]
    idx = pick_targets(victim, config.attack_targets, config.master_seed)
    model = MlpModel(config.layer_dims, exp.w0)
    acfg = AttackConfig(optimizer_steps=config.attack_steps, step_size=config.attack_step_size,
                        distance=config.attack_distance, init_seed=config.master_seed)
    base_seed = exp.clients[0].seed if exp.clients else exp.edge.seed
    results = []
    for j, i in enumerate(idx):
        state = ClientState.fresh(0, base_seed + j, config.layer_dims)
        batch = victim.subset([i])
        up, _ = end_local_round(state, exp.w0, 0, params, batch, TrainSettings(pipeline=params))
        seen = decode_update(encode_update(up))
        results.append(iterative_dra(seen, model, int(batch.labels[0]), acfg,
                                     target=batch.inputs[0], target_client=0))
    return results


def attack_experiment(config, train=None, test=None, conditions=None) -> DefenseReport:
    """Attack end client 0's round-0 uplink on ``config.attack_targets`` samples.

    ``conditions`` maps a name to PrivacyParams (None = undefended); the
    default pair is undefended vs the pipeline at ``config``'s settings.
    """
    from .fl_engine import setup_experiment

    exp = setup_experiment(config, train, test)
    if conditions is None:
        conditions = {"undefended": None, "pa-imfl": config.privacy}
    runs = []
    for name, params in conditions.items():
        results = attack_condition(config, params, exp)
        if params is None:
            runs.append(AttackRun(name, 1.0, float("inf"), 0, results))
        else:
            runs.append(AttackRun(name, params.gamma, params.epsilon, params.t, results))
    return defense_report(runs)
