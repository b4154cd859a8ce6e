"""The inner heatmap-regression model and its training loops.

A small encoder-decoder: each encoder level is conv3x3+ReLU followed by a
2x2 max-pool, the bottleneck is conv3x3+ReLU, and each decoder level is
nearest-neighbour upsampling, a skip concatenation with the matching
encoder activation, and conv3x3+ReLU; a 1x1 head maps to one raw output
channel per landmark (no output activation). Depth is the number of
pooling steps, so spatial extents must divide by 2**depth.

Training is plain Adam on the mean over channels of the per-landmark MSE
against Gaussian targets rendered from the current width vector. The
coordinate-regression variant instead decodes each predicted channel with
the differentiable spatial-softmax expectation and regresses coordinates
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .ckpt import read_checkpoint, write_checkpoint
from .errors import ConfigurationError, DimensionError
from .heatmap import argmax_decode, render_targets_batch, soft_argmax_decode_batch
from .metrics import mre, radial_errors
from .synthdata import Sample

Array = np.ndarray

_INIT_STREAM = 7


@dataclass(frozen=True)
class Architecture:
    """Shape of the regressor; depth == len(widths) pooling steps."""

    height: int
    width: int
    n_landmarks: int
    widths: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    kernel: int = 3

    def __post_init__(self) -> None:
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ConfigurationError(f"Architecture: widths must be positive, got {self.widths}")
        factor = 2 ** len(self.widths)
        if self.height % factor or self.width % factor:
            raise ConfigurationError(
                f"Architecture: {self.height}x{self.width} not divisible by 2^depth={factor}"
            )
        if self.kernel % 2 != 1:
            raise ConfigurationError(f"Architecture: kernel must be odd, got {self.kernel}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width,
            "n_landmarks": self.n_landmarks, "widths": list(self.widths),
            "in_channels": self.in_channels, "kernel": self.kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(height=d["height"], width=d["width"], n_landmarks=d["n_landmarks"],
                   widths=tuple(d["widths"]), in_channels=d["in_channels"],
                   kernel=d["kernel"])


def param_spec(arch: Architecture) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    k = arch.kernel
    spec: list[tuple[str, tuple[int, ...]]] = []
    prev = arch.in_channels
    for i, width in enumerate(arch.widths):
        spec += [(f"enc{i}_w", (width, prev, k, k)), (f"enc{i}_b", (width,))]
        prev = width
    spec += [("bott_w", (prev, prev, k, k)), ("bott_b", (prev,))]
    up = prev
    for i in reversed(range(arch.depth)):
        cin = up + arch.widths[i]
        spec += [(f"dec{i}_w", (arch.widths[i], cin, k, k)), (f"dec{i}_b", (arch.widths[i],))]
        up = arch.widths[i]
    spec += [("head_w", (arch.n_landmarks, arch.widths[0], 1, 1)),
             ("head_b", (arch.n_landmarks,))]
    return spec


@dataclass
class LearnerState:
    """Model parameters plus per-parameter Adam state; clonable."""

    arch: Architecture
    params: dict[str, nk.Tensor]
    adam: dict[str, nk.AdamState]
    seed: int

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def build_learner(arch: Architecture, seed: int) -> LearnerState:
    """He-style fan-in init for weights, zero biases, all driven by seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_STREAM)))
    params: dict[str, nk.Tensor] = {}
    adam: dict[str, nk.AdamState] = {}
    for name, shape in param_spec(arch):
        if name.endswith("_b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = nk.Tensor(np.ascontiguousarray(data), requires_grad=True)
        adam[name] = nk.AdamState.for_param(params[name].data)
    return LearnerState(arch=arch, params=params, adam=adam, seed=seed)


def clone_weights(src: LearnerState) -> LearnerState:
    """Deep, independent copy: parameters and optimizer state are bitwise
    equal to the source and never aliased."""
    params = {name: nk.Tensor(t.data.copy(), requires_grad=True)
              for name, t in src.params.items()}
    adam = {name: state.clone() for name, state in src.adam.items()}
    return LearnerState(arch=src.arch, params=params, adam=adam, seed=src.seed)


def forward(state: LearnerState, image) -> nk.Tensor:
    """Raw heatmap predictions for a (1,H,W) image or (B,1,H,W) batch."""
    x = image if isinstance(image, nk.Tensor) else nk.tensor(np.asarray(image))
    arch = state.arch
    spatial = x.shape[-2:]
    if spatial != (arch.height, arch.width) or x.shape[-3] != arch.in_channels:
        raise DimensionError(f"forward: image {x.shape} does not match architecture "
                             f"({arch.in_channels},{arch.height},{arch.width})")
    p = state.params
    skips = []
    for i in range(arch.depth):
        x = nk.relu(nk.conv2d(x, p[f"enc{i}_w"], p[f"enc{i}_b"], pad=arch.kernel // 2))
        skips.append(x)
        x = nk.pool_max2(x)
    x = nk.relu(nk.conv2d(x, p["bott_w"], p["bott_b"], pad=arch.kernel // 2))
    for i in reversed(range(arch.depth)):
        x = nk.upsample_nearest2(x)
        x = nk.concat_channels(x, skips[i])
        x = nk.relu(nk.conv2d(x, p[f"dec{i}_w"], p[f"dec{i}_b"], pad=arch.kernel // 2))
    return nk.conv2d(x, p["head_w"], p["head_b"])


def _batches(n: int, batch: int, order: Array):
    for start in range(0, n, batch):
        yield order[start:start + batch]


def _stack_batch(samples: list[Sample], rng, augment_fn):
    if augment_fn is not None:
        samples = [augment_fn(s, rng) for s in samples]
    images = np.stack([s.image for s in samples])
    coords = np.stack([s.landmarks.coords for s in samples])
    return images, coords


def _apply_grads(state: LearnerState, lr: float) -> None:
    for name, tensor in state.params.items():
        if tensor.grad is not None:
            nk.adam_step(tensor.data, tensor.grad, state.adam[name], lr)


def train_epochs(state: LearnerState, samples, sigmas, epochs: int, lr: float,
                 batch: int, rng: np.random.Generator, augment_fn=None,
                 ) -> tuple[LearnerState, list[Array]]:
    """Minimize the channel-mean heatmap MSE for ``epochs`` epochs.

    Targets are rendered from ``sigmas`` (fixed for the whole call) at the
    possibly augmented landmark positions. Sample order is shuffled by the
    supplied rng. Returns the state plus one per-landmark loss vector per
    epoch: the mean over batches of the forward (pre-update) channel MSEs.
    With ``lr == 0`` no optimizer steps are applied.
    """
    samples = list(samples)
    if not samples:
        raise ConfigurationError("train_epochs: empty training set")
    if epochs < 1:
        raise ConfigurationError(f"train_epochs: epochs must be >= 1, got {epochs}")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    arch = state.arch
    epoch_losses: list[Array] = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for idx in _batches(len(samples), batch, order):
            chosen = [samples[i] for i in idx]
            images, coords = _stack_batch(chosen, rng, augment_fn)
            targets = render_targets_batch(coords, sigmas, arch.height, arch.width)
            for tensor in state.params.values():
                tensor.zero_grad()
            out = forward(state, images)
            loss_vec = nk.mse_per_channel(out, targets)
            batch_losses.append(loss_vec.data.copy())
            if lr:
                nk.mean_all(loss_vec).backward()
                _apply_grads(state, lr)
        epoch_losses.append(np.mean(batch_losses, axis=0))
    return state, epoch_losses


def train_coordreg(state: LearnerState, samples, epochs: int, lr: float,
                   batch: int, rng: np.random.Generator, augment_fn=None,
                   ) -> tuple[LearnerState, list[Array]]:
    """Coordinate-regression training: spatial-softmax decode, MSE on
    coordinates, gradients flowing through the decode."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("train_coordreg: empty training set")
    if epochs < 1:
        raise ConfigurationError(f"train_coordreg: epochs must be >= 1, got {epochs}")
    n_lm = state.arch.n_landmarks
    epoch_losses: list[Array] = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for idx in _batches(len(samples), batch, order):
            chosen = [samples[i] for i in idx]
            images, coords = _stack_batch(chosen, rng, augment_fn)
            gt = coords.reshape(-1, 2)
            for tensor in state.params.values():
                tensor.zero_grad()
            out = forward(state, images)
            decoded = soft_argmax_decode_batch(out)            # (B*N, 2)
            diff = nk.sub_const(decoded, gt)
            sq = nk.mul(diff, diff)
            per_lm = (sq.data.reshape(-1, n_lm, 2)).mean(axis=(0, 2))
            batch_losses.append(per_lm)
            if lr:
                nk.mean_all(sq).backward()
                _apply_grads(state, lr)
        epoch_losses.append(np.mean(batch_losses, axis=0))
    return state, epoch_losses


def validate(state: LearnerState, samples, batch: int = 32) -> Array:
    """Per-landmark mean radial error (pixels) under argmax decoding."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("validate: empty validation set")
    preds = []
    gts = []
    with nk.no_grad():
        for start in range(0, len(samples), batch):
            chosen = samples[start:start + batch]
            images = np.stack([s.image for s in chosen])
            out = forward(state, images)
            preds.append(argmax_decode(out.data))
            gts.append(np.stack([s.landmarks.coords for s in chosen]))
    table = radial_errors(np.concatenate(preds), np.concatenate(gts), resolution=1.0)
    return mre(table).per_landmark


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_learner(path, state: LearnerState) -> None:
    write_checkpoint(path, "learner", {"arch": state.arch.to_dict(), "seed": state.seed},
                     [(name, t.data) for name, t in state.params.items()])


def load_learner(path) -> LearnerState:
    meta, params = read_checkpoint(path, expect_kind="learner")
    arch = Architecture.from_dict(meta["arch"])
    expected = param_spec(arch)
    got = [(name, arr.shape) for name, arr in params]
    if got != [(n, tuple(s)) for n, s in expected]:
        raise ConfigurationError(f"{path}: parameter list does not match architecture")
    state = build_learner(arch, seed=int(meta.get("seed", 0)))
    for name, arr in params:
        state.params[name].data[...] = arr
    return state
