"""Deep linear networks ``f(x) = W_d ... W_1 x`` trained by full-batch gradient descent.

Losses carry the ``1/(2n)`` (squared loss) or ``1/n`` (cross-entropy,
logistic) normalisation, so per-sample output gradients ``dL_dF`` are stacked
unaveraged and the ``1/n`` is applied once when forming layer gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, NonFiniteError, ShapeError
from .linalg import DEFAULT_RANK_TOL, as_matrix, invariance_scores, layer_adjacent_scores

DIVERGENCE_LOSS = 1e12
LOSS_KINDS = ("mse", "xent", "logistic", "sensing")


@dataclass(frozen=True)
class LinearNetwork:
    layers: tuple

    def __post_init__(self):
        layers = tuple(as_matrix(w, f"W_{i + 1}") for i, w in enumerate(self.layers))
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].shape[1] != layers[i - 1].shape[0]:
                raise ShapeError(
                    f"W_{i + 1} has {layers[i].shape[1]} columns but W_{i} has {layers[i - 1].shape[0]} rows")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x, y = as_matrix(self.x, "X"), as_matrix(self.y, "Y")
        if x.shape[1] != y.shape[1]:
            raise ShapeError(f"X has {x.shape[1]} samples but Y has {y.shape[1]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SensingData:
    """Observations ``targets[i] ~ Tr(sensors[i].T @ P)`` of an unknown square P."""

    sensors: tuple
    targets: np.ndarray

    def __post_init__(self):
        sensors = tuple(as_matrix(m, "sensor") for m in self.sensors)
        if not sensors:
            raise ShapeError("need at least one sensor")
        k = sensors[0].shape
        if k[0] != k[1] or any(m.shape != k for m in sensors):
            raise ShapeError("sensors must be square and share one shape")
        targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if len(targets) != len(sensors):
            raise ShapeError("one target per sensor required")
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return len(self.sensors)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    max_steps: int = 10000
    loss_stop: float = 1e-4
    record_every: int = 100
    rank_tol: float = DEFAULT_RANK_TOL
    max_rank: Optional[int] = None
    keep_snapshots: bool = False
    measure: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 1 or self.record_every < 1:
            raise ValueError("max_steps and record_every must be >= 1")


@dataclass
class TrainTrace:
    depth: int
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    adjacent: list = field(default_factory=list)
    inv_u: list = field(default_factory=list)
    inv_v: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    converged: bool = False
    final_net: Optional[LinearNetwork] = None

    def __len__(self):
        return len(self.steps)

    def min_adjacent(self) -> float:
        vals = [v for row in self.adjacent for v in row]
        return min(vals) if vals else 1.0


# -- forward / losses ---------------------------------------------------------

def forward(net: LinearNetwork, x) -> np.ndarray:
    out = as_matrix(x, "x")
    if out.shape[0] != net.dims[0]:
        raise ShapeError(f"input has {out.shape[0]} rows, network expects {net.dims[0]}")
    for w in net.layers:
        out = w @ out
    return out


def end_to_end(net: LinearNetwork) -> np.ndarray:
    p = net.layers[0]
    for w in net.layers[1:]:
        p = w @ p
    return p


def _check_data(net: LinearNetwork, data: Dataset):
    if data.x.shape[0] != net.dims[0] or data.y.shape[0] != net.dims[-1]:
        raise ShapeError(
            f"data shapes X{data.x.shape}, Y{data.y.shape} do not match network dims {net.dims}")


def mse_loss(net: LinearNetwork, data: Dataset) -> float:
    _check_data(net, data)
    r = data.y - forward(net, data.x)
    return float(np.sum(r * r) / (2 * data.n))


def softmax_xent_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over columns and the unaveraged ``softmax - labels``."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} vs labels {t.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits")
    shifted = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    log_p = shifted - log_norm
    loss = float(-np.sum(t * log_p) / z.shape[1])
    return loss, np.exp(log_p) - t


def logistic_loss_grad(outputs, targets) -> tuple[float, np.ndarray]:
    """Mean ``log(1 + exp(-y f))`` for labels y in {-1, +1}."""
    f = np.asarray(outputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.shape != y.shape:
        raise ShapeError(f"outputs {f.shape} vs targets {y.shape}")
    m = -y * f
    loss = float(np.sum(np.logaddexp(0.0, m)) / f.shape[1])
    # d/df log(1+e^{-yf}) = -y * sigmoid(-yf)
    sig = np.exp(-np.logaddexp(0.0, -m))
    return loss, -y * sig


def gradient_factors(net: LinearNetwork, x: np.ndarray, dL_dF: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per layer ``(B_i, A_i)`` with ``B_i = (W_d..W_{i+1})^T dL_dF`` and ``A_i = W_{i-1}..W_1 x``.

    The unscaled layer gradient is ``B_i @ A_i.T``; keeping the factors lets
    structured layers take inner products without forming it.
    """
    acts = [x]
    for w in net.layers[:-1]:
        acts.append(w @ acts[-1])
    back = [None] * net.depth
    b = dL_dF
    for i in range(net.depth - 1, -1, -1):
        back[i] = b
        if i:
            b = net.layers[i].T @ b
    return list(zip(back, acts))


def general_gradient(net: LinearNetwork, x, dL_dF, layer_index: int) -> np.ndarray:
    """``(1/n) (W_d..W_{i+1})^T dL_dF (W_{i-1}..W_1 x)^T`` for 1-based ``layer_index``."""
    x = as_matrix(x, "x")
    dL_dF = as_matrix(dL_dF, "dL_dF")
    if not 1 <= layer_index <= net.depth:
        raise ShapeError(f"layer_index must be in [1, {net.depth}]")
    if x.shape[0] != net.dims[0] or dL_dF.shape != (net.dims[-1], x.shape[1]):
        raise ShapeError("x / dL_dF shapes do not match the network")
    b, a = gradient_factors(net, x, dL_dF)[layer_index - 1]
    return b @ a.T / x.shape[1]


def mse_gradient(net: LinearNetwork, data: Dataset, layer_index: int) -> np.ndarray:
    _check_data(net, data)
    residual = data.y - forward(net, data.x)
    return general_gradient(net, data.x, -residual, layer_index)


def _sensing_factors(net: LinearNetwork, data: SensingData):
    k = data.sensors[0].shape[0]
    if net.dims[0] != k or net.dims[-1] != k:
        raise ShapeError(f"sensors are {k}x{k} but network maps {net.dims[0]} -> {net.dims[-1]}")
    stack = np.stack(data.sensors)
    residual = data.targets - np.einsum("ipq,pq->i", stack, end_to_end(net))
    loss = float(residual @ residual / (2 * data.n))
    g = -np.einsum("i,ipq->pq", residual, stack) / data.n
    return loss, gradient_factors(net, np.eye(k), g)


def sensing_loss_grad(net: LinearNetwork, sensors, targets=None) -> tuple[float, list[np.ndarray]]:
    """``(1/2n) sum_i (y_i - Tr(M_i^T P))^2`` with ``P`` the end-to-end map, and layer gradients."""
    data = sensors if isinstance(sensors, SensingData) else SensingData(tuple(sensors), targets)
    loss, factors = _sensing_factors(net, data)
    return loss, [b @ a.T for b, a in factors]


def output_loss_grad(outputs: np.ndarray, y: np.ndarray, loss_kind: str) -> tuple[float, np.ndarray]:
    """Loss and per-sample ``dL_dF`` (before the 1/n) for a batch of outputs."""
    if loss_kind == "mse":
        r = y - outputs
        return float(np.sum(r * r) / (2 * y.shape[1])), -r
    if loss_kind == "xent":
        return softmax_xent_grad(outputs, y)
    if loss_kind == "logistic":
        return logistic_loss_grad(outputs, y)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def loss_and_factors(net: LinearNetwork, data, loss_kind: str = "mse"):
    """Loss plus the gradient factor list; gradients are ``B @ A.T * scale``.

    Returns ``(loss, factors, scale)``.
    """
    if loss_kind == "sensing":
        loss, factors = _sensing_factors(net, data)
        return loss, factors, 1.0
    _check_data(net, data)
    loss, dl_df = output_loss_grad(forward(net, data.x), data.y, loss_kind)
    return loss, gradient_factors(net, data.x, dl_df), 1.0 / data.n


def loss_and_gradients(net: LinearNetwork, data, loss_kind: str = "mse") -> tuple[float, list[np.ndarray]]:
    loss, factors, scale = loss_and_factors(net, data, loss_kind)
    return loss, [scale * (b @ a.T) for b, a in factors]


def loss_value(net: LinearNetwork, data, loss_kind: str = "mse") -> float:
    if loss_kind == "sensing":
        return _sensing_factors(net, data)[0]
    _check_data(net, data)
    return output_loss_grad(forward(net, data.x), data.y, loss_kind)[0]


def gd_step(net: LinearNetwork, data, gamma: float, loss_kind: str = "mse") -> LinearNetwork:
    """One simultaneous update: every gradient is taken at the pre-step weights."""
    if gamma < 0:
        raise ValueError("learning rate must be nonnegative")
    _, grads = loss_and_gradients(net, data, loss_kind)
    return LinearNetwork(tuple(w - gamma * g for w, g in zip(net.layers, grads)))


# -- training loop --------------------------------------------------------------

def _guard(loss: float, step: int):
    if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise DivergenceError(f"loss {loss!r} at step {step} exceeds divergence guard", step, loss)


def run_training(state, loss_grad: Callable, update: Callable, to_net: Callable,
                 config: TrainConfig) -> TrainTrace:
    """Generic GD loop shared by dense and structured layers.

    ``loss_grad(state) -> (loss, aux)``; ``update(state, aux) -> state``;
    ``to_net(state) -> LinearNetwork``. Records step 0, every
    ``record_every`` steps, and the step at which training stops.
    """
    net0 = to_net(state)
    trace = TrainTrace(depth=net0.depth)

    def record(step, loss, net):
        trace.steps.append(step)
        trace.losses.append(loss)
        if config.measure:
            if net.depth > 1:
                adj = layer_adjacent_scores(net, config.rank_tol, config.max_rank)
                trace.adjacent.append([s.value for s in adj])
            else:
                trace.adjacent.append([])
            inv = invariance_scores(net, net0, config.rank_tol, config.max_rank)
            trace.inv_u.append([u.value for u, _ in inv])
            trace.inv_v.append([v.value for _, v in inv])
        if config.keep_snapshots:
            trace.snapshots.append(net)

    step = 0
    while True:
        loss, aux = loss_grad(state)
        _guard(loss, step)
        done = loss <= config.loss_stop
        if done or step == config.max_steps or step % config.record_every == 0:
            record(step, loss, to_net(state))
        if done:
            trace.converged = True
            break
        if step == config.max_steps:
            break
        state = update(state, aux)
        step += 1
    trace.final_net = to_net(state)
    return trace


def train(net: LinearNetwork, data, config: TrainConfig, loss_kind: str = "mse") -> TrainTrace:
    """Full-batch GD until ``loss <= loss_stop`` or ``max_steps`` updates."""
    gamma = config.learning_rate

    def loss_grad(n):
        return loss_and_gradients(n, data, loss_kind)

    def update(n, grads):
        return LinearNetwork(tuple(w - gamma * g for w, g in zip(n.layers, grads)))

    return run_training(net, loss_grad, update, lambda n: n, config)


def identity_network(dims: Sequence[int]) -> LinearNetwork:
    return LinearNetwork(tuple(np.eye(dims[i + 1], dims[i]) for i in range(len(dims) - 1)))
