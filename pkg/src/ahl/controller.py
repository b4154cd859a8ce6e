"""Per-landmark policy controllers over width adjustments.

Each landmark owns a small MLP (ReLU hidden layers, softmax head) that
maps its recent per-epoch training losses to probabilities over the three
adjustment actions (-1, 0, +1). Actions are drawn by inverse CDF from one
uniform variate. Updates follow the score-function rule: ascend the
reward-weighted log-probability of the taken actions, implemented by
descending the surrogate -(1/K) * sum_j R_j * log p_j through Adam.

The final layer starts at zero so training begins from the uniform policy;
hidden layers use He-style init. A frozen controller never changes again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import ConfigurationError, DimensionError

Array = np.ndarray

ACTIONS = (-1.0, 0.0, 1.0)
_INIT_STREAM = 13


@dataclass
class ControllerState:
    """Policy parameters, optimizer state, and the loss-history buffer."""

    params: dict[str, nk.Tensor]
    adam: dict[str, nk.AdamState]
    history: list[float] = field(default_factory=list)
    history_len: int = 5
    frozen: bool = False
    eta: float = 1e-3

    @property
    def input_dim(self) -> int:
        return self.params["w0"].shape[1]


@dataclass(frozen=True)
class ActionSample:
    """One drawn adjustment with the probabilities it came from."""

    action: float
    probs: Array
    index: int


@dataclass(frozen=True)
class RewardRecord:
    """Bookkeeping for one (landmark, sample) reward; R = C - epsilon."""

    landmark: int
    sample: int
    sigma: float
    epsilon: float
    reward: float


def build_controller(seed: int, input_dim: int = 5, hidden: tuple[int, int] = (64, 32),
                     eta: float = 1e-3) -> ControllerState:
    """MLP input_dim -> hidden[0] -> hidden[1] -> 3; zero final layer."""
    if input_dim < 1:
        raise ConfigurationError(f"build_controller: input_dim must be >= 1, got {input_dim}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_STREAM)))
    dims = (input_dim, hidden[0], hidden[1], len(ACTIONS))
    params: dict[str, nk.Tensor] = {}
    adam: dict[str, nk.AdamState] = {}
    for layer in range(3):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        if layer == 2:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        params[f"w{layer}"] = nk.Tensor(np.ascontiguousarray(w), requires_grad=True)
        params[f"b{layer}"] = nk.Tensor(np.zeros(fan_out), requires_grad=True)
    for name, tensor in params.items():
        adam[name] = nk.AdamState.for_param(tensor.data)
    return ControllerState(params=params, adam=adam, history_len=input_dim, eta=eta)


def clone_controller(src: ControllerState) -> ControllerState:
    params = {name: nk.Tensor(t.data.copy(), requires_grad=True)
              for name, t in src.params.items()}
    adam = {name: state.clone() for name, state in src.adam.items()}
    return ControllerState(params=params, adam=adam, history=list(src.history),
                           history_len=src.history_len, frozen=src.frozen, eta=src.eta)


def push_history(ctrl: ControllerState, loss: float) -> None:
    """Append one per-epoch loss, keeping the newest ``history_len`` values."""
    ctrl.history.append(float(loss))
    if len(ctrl.history) > ctrl.history_len:
        del ctrl.history[:len(ctrl.history) - ctrl.history_len]


def padded_history(ctrl: ControllerState) -> Array:
    """History as a fixed-length vector, repeating the earliest value while
    fewer than ``history_len`` epochs have elapsed."""
    if not ctrl.history:
        raise ConfigurationError("padded_history: no losses recorded yet")
    hist = list(ctrl.history)
    pad = [hist[0]] * (ctrl.history_len - len(hist))
    return np.asarray(pad + hist, dtype=np.float64)


def _logits(ctrl: ControllerState, rows: nk.Tensor) -> nk.Tensor:
    p = ctrl.params
    x = nk.relu(nk.linear(rows, p["w0"], p["b0"]))
    x = nk.relu(nk.linear(x, p["w1"], p["b1"]))
    return nk.linear(x, p["w2"], p["b2"])


def policy_forward(ctrl: ControllerState, loss_history) -> Array:
    """Action probabilities for one loss-history vector."""
    hist = np.asarray(loss_history, dtype=np.float64)
    if hist.shape != (ctrl.input_dim,):
        raise DimensionError(f"policy_forward: history {hist.shape}, "
                             f"expected ({ctrl.input_dim},)")
    with nk.no_grad():
        logits = _logits(ctrl, nk.tensor(hist[None, :]))
        return nk.softmax(logits, axis=-1).data[0]


def sample_action(probs, rng: np.random.Generator) -> ActionSample:
    """Inverse-CDF draw over the action probabilities using one uniform
    variate: the chosen index is the smallest k with u < cumsum(probs)[k]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(ACTIONS),) or (probs < 0).any() \
            or abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"sample_action: invalid probability vector {probs}")
    u = rng.random()
    index = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    index = min(index, len(ACTIONS) - 1)
    return ActionSample(action=ACTIONS[index], probs=probs, index=index)


def compute_reward(epsilon: float, c: float) -> float:
    """R = C - epsilon; errors above C earn a negative reward."""
    return c - epsilon


def reinforce_update(ctrl: ControllerState, trajectories, eta: float | None = None,
                     ) -> ControllerState:
    """One policy-gradient step from K (history, chosen index, reward)
    trajectories. Frozen controllers are returned unchanged."""
    if ctrl.frozen:
        return ctrl
    trajectories = list(trajectories)
    if not trajectories:
        raise ConfigurationError("reinforce_update: need at least one trajectory")
    eta = ctrl.eta if eta is None else eta
    k = len(trajectories)
    histories = np.stack([np.asarray(h, dtype=np.float64) for h, _, _ in trajectories])
    chosen = np.asarray([idx for _, idx, _ in trajectories], dtype=np.intp)
    rewards = np.asarray([r for _, _, r in trajectories], dtype=np.float64)
    for tensor in ctrl.params.values():
        tensor.zero_grad()
    logp = nk.log_softmax(_logits(ctrl, nk.tensor(histories)), axis=-1)
    picked = nk.gather_rows(logp, chosen)
    surrogate = nk.scale(nk.sum_all(nk.mul_const(picked, rewards)), -1.0 / k)
    surrogate.backward()
    for name, tensor in ctrl.params.items():
        if tensor.grad is not None:
            nk.adam_step(tensor.data, tensor.grad, ctrl.adam[name], eta)
    return ctrl
