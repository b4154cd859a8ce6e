"""Bilevel training loop with policy-driven target-precision search.

One outer iteration covers ``t_prime`` inner epochs: the per-landmark
policies propose K width vectors, K clones of the current model train in
parallel (one clone per vector), the clone with the best mean validation
error is broadcast as the sole surviving model, each unfrozen landmark
adopts the width from its own best-reward sample, and the policies take a
REINFORCE step from the K rewards. A landmark freezes once the variance
of its recent validation errors drops below a threshold.

All randomness derives from the run seed through named streams keyed by
(epoch, sample) or iteration, so serial and parallel execution are
bitwise identical, and a K=1 run with a never-moving policy reproduces
plain fixed-width training exactly.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .ckpt import write_checkpoint
from .controller import (
    ActionSample,
    ControllerState,
    RewardRecord,
    build_controller,
    compute_reward,
    padded_history,
    policy_forward,
    push_history,
    reinforce_update,
    sample_action,
)
from .errors import ConfigurationError, NumericalError
from .heatmap import argmax_decode, soft_argmax_decode_batch
from .learner import (
    Architecture,
    LearnerState,
    build_learner,
    clone_weights,
    forward,
    save_learner,
    train_coordreg,
    train_epochs,
    validate,
)
from .metrics import mre, pck, radial_errors
from .synthdata import DatasetSplit, augment

Array = np.ndarray

_STREAM_ACTIONS = 2
_STREAM_TRAIN = 3
_STREAM_CONTROLLER = 5

_SCHEDULE_BASE_EPOCHS = 250
_BASE_WARMUP = 30
_BASE_EARLY_STOP_START = 100

MODES = ("laoml", "fixed", "decay", "coordreg")


def derive_rng(*key: int) -> np.random.Generator:
    """Deterministic generator for a named stream of the run seed."""
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """All run constants; ``warmup`` and ``early_stop_start`` default to
    None, meaning the 250-epoch reference values (30 and 100) scaled by
    total_epochs/250 and rounded to a multiple of ``t_prime``."""

    mode: str = "laoml"
    total_epochs: int = 250
    warmup: int | None = None
    t_prime: int = 5
    k_samples: int = 10
    sigma_init: float = 5.0
    sigma_min: float = 1.0
    sigma_max: float = 20.0
    reward_c: float = 25.0
    early_stop: bool = True
    early_stop_window: int = 30
    early_stop_threshold: float = 0.01
    early_stop_start: int | None = None
    learner_lr: float = 2e-4
    controller_lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    threads: int = 1
    augment: bool = True
    sigma_broadcast: str = "per_landmark"
    pck_thresholds: tuple[float, ...] = (2.0, 3.0, 5.0)
    resolution: float = 1.0
    widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_epochs < 1 or self.t_prime < 1 or self.k_samples < 1:
            raise ConfigurationError("total_epochs, t_prime and k_samples must be >= 1")
        if not self.sigma_min <= self.sigma_init <= self.sigma_max:
            raise ConfigurationError(
                f"need sigma_min <= sigma_init <= sigma_max, got "
                f"{self.sigma_min}/{self.sigma_init}/{self.sigma_max}"
            )
        if self.sigma_min <= 0:
            raise ConfigurationError(f"sigma_min must be positive, got {self.sigma_min}")
        if self.early_stop_window % self.t_prime:
            raise ConfigurationError(
                f"early_stop_window ({self.early_stop_window}) must be a multiple of "
                f"t_prime ({self.t_prime})"
            )
        if self.batch < 1 or self.threads < 1:
            raise ConfigurationError("batch and threads must be >= 1")
        if self.sigma_broadcast not in ("per_landmark", "global"):
            raise ConfigurationError(
                f"sigma_broadcast must be 'per_landmark' or 'global', "
                f"got {self.sigma_broadcast!r}"
            )
        if any(t <= 0 for t in self.pck_thresholds):
            raise ConfigurationError("pck thresholds must be positive")
        if self.resolution <= 0:
            raise ConfigurationError("resolution must be positive")

    def resolved_warmup(self) -> int:
        if self.warmup is not None:
            return self.warmup
        factor = min(1.0, self.total_epochs / _SCHEDULE_BASE_EPOCHS)
        scaled = int(_BASE_WARMUP * factor / self.t_prime + 0.5) * self.t_prime
        return max(self.t_prime, scaled)

    def resolved_early_stop_start(self) -> int:
        if self.early_stop_start is not None:
            return self.early_stop_start
        factor = min(1.0, self.total_epochs / _SCHEDULE_BASE_EPOCHS)
        scaled = int(_BASE_EARLY_STOP_START * factor / self.t_prime + 0.5) * self.t_prime
        return max(self.resolved_warmup(), scaled)

    def n_iterations(self) -> int:
        return (self.total_epochs - self.resolved_warmup()) // self.t_prime

    def validate_schedule(self) -> None:
        if self.mode == "laoml" and self.resolved_warmup() > self.total_epochs:
            raise ConfigurationError(
                f"warm-up ({self.resolved_warmup()}) exceeds the epoch budget "
                f"({self.total_epochs})"
            )

    def echo(self) -> dict:
        d = asdict(self)
        d["warmup"] = self.resolved_warmup()
        d["early_stop_start"] = self.resolved_early_stop_start()
        d["pck_thresholds"] = list(self.pck_thresholds)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for name in cls.__dataclass_fields__:
            if name in d:
                kwargs[name] = d[name]
        for name in ("pck_thresholds", "widths"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Early stop
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    """Per-landmark validation-error history of the broadcast lineage,
    recorded once per iteration (``epochs_per_record`` epochs each)."""

    n_landmarks: int
    epochs_per_record: int
    buffers: list[list[float]] = field(default_factory=list)
    frozen: Array = field(default_factory=lambda: np.zeros(0, dtype=bool))
    variances: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if not self.buffers:
            self.buffers = [[] for _ in range(self.n_landmarks)]
        if self.frozen.size == 0:
            self.frozen = np.zeros(self.n_landmarks, dtype=bool)
        if self.variances.size == 0:
            self.variances = np.full(self.n_landmarks, np.nan)

    def append(self, eps: Array) -> None:
        for i in range(self.n_landmarks):
            self.buffers[i].append(float(eps[i]))


def early_stop_check(state: EarlyStopState, m_epochs: int, threshold: float) -> list[int]:
    """Freeze landmarks whose error variance over the last ``m_epochs``
    (population variance of the per-iteration records) drops below the
    threshold. No-op for landmarks with fewer records than the window."""
    window = m_epochs // state.epochs_per_record
    newly: list[int] = []
    for i in range(state.n_landmarks):
        if state.frozen[i] or len(state.buffers[i]) < window:
            continue
        recent = np.asarray(state.buffers[i][-window:])
        v = float(recent.var())
        state.variances[i] = v
        if v < threshold:
            state.frozen[i] = True
            newly.append(i)
    return newly


# ---------------------------------------------------------------------------
# Sampling and selection
# ---------------------------------------------------------------------------

def sample_sigma_sets(controllers: list[ControllerState], sigmas: Array, k: int,
                      rng: np.random.Generator, sigma_min: float, sigma_max: float,
                      ) -> tuple[Array, list[list[ActionSample | None]], list[Array | None]]:
    """Draw K width vectors from the policies.

    Returns (sigma_sets (K,N), the K x N drawn ActionSamples, per-landmark
    history snapshots). Frozen landmarks are never sampled: they keep
    their width and get no ActionSample (None).
    """
    n = len(controllers)
    histories: list[Array | None] = []
    probs = np.zeros((n, 3))
    for i, ctrl in enumerate(controllers):
        if ctrl.frozen:
            histories.append(None)
        else:
            hist = padded_history(ctrl)
            histories.append(hist)
            probs[i] = policy_forward(ctrl, hist)
    sigma_sets = np.tile(sigmas, (k, 1)).astype(np.float64)
    actions: list[list[ActionSample | None]] = []
    for j in range(k):
        row: list[ActionSample | None] = []
        for i, ctrl in enumerate(controllers):
            if ctrl.frozen:
                row.append(None)
                continue
            drawn = sample_action(probs[i], rng)
            row.append(drawn)
            sigma_sets[j, i] = float(np.clip(sigmas[i] + drawn.action, sigma_min, sigma_max))
        actions.append(row)
    return sigma_sets, actions, histories


def select_best(eps: Array) -> tuple[int, Array]:
    """Model broadcast index (argmin of the landmark-mean error) and the
    per-landmark width source indices (argmin error per landmark); all
    ties break to the lowest sample index."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or not np.isfinite(eps).all():
        raise NumericalError(f"select_best: need a finite (K,N) matrix, got {eps.shape}")
    j_star = int(eps.mean(axis=1).argmin())
    sources = eps.argmin(axis=0)
    return j_star, sources


# ---------------------------------------------------------------------------
# Inner-training adapter
# ---------------------------------------------------------------------------

class HeatmapTrainer:
    """Couples a LearnerState to the datasets for block training.

    ``train_block`` runs one epoch at a time so that every epoch gets its
    own derived rng stream keyed by (seed, epoch index, sample tag); the
    lineage always carries tag 0, clone j carries tag j.
    """

    def __init__(self, state: LearnerState, train_samples, val_samples,
                 cfg: TrainConfig) -> None:
        self.state = state
        self.train_samples = train_samples
        self.val_samples = val_samples
        self.cfg = cfg
        self.augment_fn = augment if cfg.augment else None

    def clone(self) -> "HeatmapTrainer":
        return HeatmapTrainer(clone_weights(self.state), self.train_samples,
                              self.val_samples, self.cfg)

    def train_block(self, sigmas: Array, epoch_indices, sample_tag: int,
                    ) -> tuple[list[Array], list[Array]]:
        losses: list[Array] = []
        val_errors: list[Array] = []
        for e in epoch_indices:
            rng = derive_rng(self.cfg.seed, _STREAM_TRAIN, e, sample_tag)
            _, epoch_losses = train_epochs(
                self.state, self.train_samples, sigmas, 1, self.cfg.learner_lr,
                self.cfg.batch, rng, augment_fn=self.augment_fn)
            losses.append(epoch_losses[0])
            val_errors.append(validate(self.state, self.val_samples))
        return losses, val_errors


def _clones_bitwise_equal(trainers: list) -> bool:
    states = [t.state for t in trainers if hasattr(t, "state")]
    if len(states) != len(trainers) or not states:
        return True                      # stub trainers: nothing to compare
    first = states[0]
    return all(
        np.array_equal(first.params[name].data, other.params[name].data)
        for other in states[1:] for name in first.params
    )


def _run_blocks(clones: list, sigma_sets: Array, epoch_indices, threads: int):
    if threads <= 1 or len(clones) == 1:
        return [clones[j].train_block(sigma_sets[j], epoch_indices, j)
                for j in range(len(clones))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(clones[j].train_block, sigma_sets[j], epoch_indices, j)
                   for j in range(len(clones))]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# The outer loop
# ---------------------------------------------------------------------------

@dataclass
class LoopState:
    cfg: TrainConfig
    trainer: object
    controllers: list[ControllerState]
    sigmas: Array
    early: EarlyStopState
    epoch: int = 0
    iteration: int = 0


@dataclass(frozen=True)
class IterationResult:
    j_star: int
    sigma_sets: Array                 # (K,N) widths each clone trained under
    eps: Array                        # (K,N) final validation errors
    rewards: Array                    # (K,N) C - eps
    reward_records: list[RewardRecord]
    sigma_sources: Array              # (N,) per-landmark winning sample
    winner_losses: list[Array]        # per-epoch per-landmark train losses
    winner_val_errors: list[Array]    # per-epoch per-landmark val errors
    newly_frozen: tuple[int, ...]


def run_iteration(loop: LoopState) -> IterationResult:
    """One sample/train/select/broadcast/update/early-stop cycle."""
    cfg = loop.cfg
    k = cfg.k_samples
    rng = derive_rng(cfg.seed, _STREAM_ACTIONS, loop.iteration)
    sigma_sets, actions, histories = sample_sigma_sets(
        loop.controllers, loop.sigmas, k, rng, cfg.sigma_min, cfg.sigma_max)

    clones = [loop.trainer.clone() for _ in range(k)]
    if not _clones_bitwise_equal(clones):
        raise NumericalError("run_iteration: clones are not bitwise-identical after broadcast")
    epoch_indices = range(loop.epoch, loop.epoch + cfg.t_prime)
    try:
        results = _run_blocks(clones, sigma_sets, epoch_indices, cfg.threads)
    except NumericalError as exc:
        raise NumericalError(
            f"iteration {loop.iteration} (epochs {loop.epoch}..{loop.epoch + cfg.t_prime - 1}) "
            f"aborted: {exc}"
        ) from exc

    eps = np.stack([val_errors[-1] for _, val_errors in results])
    rewards = np.asarray([[compute_reward(eps[j, i], cfg.reward_c)
                           for i in range(eps.shape[1])] for j in range(k)])
    records = [RewardRecord(landmark=i, sample=j, sigma=float(sigma_sets[j, i]),
                            epsilon=float(eps[j, i]), reward=float(rewards[j, i]))
               for j in range(k) for i in range(eps.shape[1])]
    j_star, sources = select_best(eps)

    loop.trainer = clones[j_star]
    for i, ctrl in enumerate(loop.controllers):
        if ctrl.frozen:
            continue
        src = j_star if cfg.sigma_broadcast == "global" else int(sources[i])
        loop.sigmas[i] = sigma_sets[src, i]
        trajectories = [(histories[i], actions[j][i].index, float(rewards[j, i]))
                        for j in range(k)]
        reinforce_update(ctrl, trajectories, cfg.controller_lr)

    winner_losses, winner_val_errors = results[j_star]
    for loss_vec in winner_losses:
        for i, ctrl in enumerate(loop.controllers):
            if not ctrl.frozen:
                push_history(ctrl, loss_vec[i])

    loop.early.append(eps[j_star])
    loop.epoch += cfg.t_prime
    loop.iteration += 1
    newly: tuple[int, ...] = ()
    if cfg.early_stop and loop.epoch >= cfg.resolved_early_stop_start():
        newly = tuple(early_stop_check(loop.early, cfg.early_stop_window,
                                       cfg.early_stop_threshold))
        for i in newly:
            loop.controllers[i].frozen = True
    return IterationResult(j_star=j_star, sigma_sets=sigma_sets, eps=eps,
                           rewards=rewards, reward_records=records,
                           sigma_sources=sources, winner_losses=winner_losses,
                           winner_val_errors=winner_val_errors, newly_frozen=newly)


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    """Everything a run leaves behind; ``save`` writes the on-disk layout.

    Wall-clock timings go to their own file (timings.json) and are not
    part of the deterministic artifact surface.
    """

    config_echo: dict
    sigma_rows: list[tuple[int, int, float]] = field(default_factory=list)
    reward_rows: list[tuple[int, int, int, float, float]] = field(default_factory=list)
    epoch_rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    DETERMINISTIC_FILES = ("config.echo.json", "sigma.csv", "reward.csv",
                           "epochs.csv", "summary.json")

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo.json").write_text(
            json.dumps(self.config_echo, sort_keys=True, indent=2) + "\n")
        lines = ["iteration,landmark,sigma"]
        lines += [f"{it},{lm},{s!r}" for it, lm, s in self.sigma_rows]
        (out / "sigma.csv").write_text("\n".join(lines) + "\n")
        lines = ["iteration,sample,landmark,epsilon,reward"]
        lines += [f"{it},{j},{lm},{e!r},{r!r}" for it, j, lm, e, r in self.reward_rows]
        (out / "reward.csv").write_text("\n".join(lines) + "\n")
        lines = ["epoch,landmark,train_mse,val_mre"]
        lines += [f"{ep},{lm},{tr!r},{va!r}" for ep, lm, tr, va in self.epoch_rows]
        (out / "epochs.csv").write_text("\n".join(lines) + "\n")
        (out / "summary.json").write_text(
            json.dumps(self.summary, sort_keys=True, indent=2) + "\n")
        (out / "timings.json").write_text(
            json.dumps(self.timings, sort_keys=True, indent=2) + "\n")


def evaluate_state(state: LearnerState, samples, resolution: float,
                   pck_thresholds, batch: int = 32, decode: str = "argmax",
                   ) -> tuple[dict, Array]:
    """Decode a sample set and compute the metric summary.

    ``decode`` is "argmax" for heatmap-trained models and "soft" for the
    coordinate-regression mode, whose predictions are defined as the
    spatial-softmax expectation it was trained through.
    """
    samples = list(samples)
    if not samples:
        raise ConfigurationError("evaluate_state: empty evaluation set")
    if decode not in ("argmax", "soft"):
        raise ConfigurationError(f"evaluate_state: unknown decode {decode!r}")
    n_lm = state.arch.n_landmarks
    preds, gts = [], []
    with nk.no_grad():
        for start in range(0, len(samples), batch):
            chosen = samples[start:start + batch]
            images = np.stack([s.image for s in chosen])
            out = forward(state, images)
            if decode == "soft":
                coords = soft_argmax_decode_batch(out).data
                preds.append(coords.reshape(len(chosen), n_lm, 2))
            else:
                preds.append(argmax_decode(out.data))
            gts.append(np.stack([s.landmarks.coords for s in chosen]))
    table = radial_errors(np.concatenate(preds), np.concatenate(gts), resolution)
    summary_mre = mre(table)
    summary = {
        "per_landmark_mre": [float(v) for v in summary_mre.per_landmark],
        "mean_mre": summary_mre.mean,
        "sd_mre": summary_mre.sd,
        "pck": {str(t): pck(table, t) for t in pck_thresholds},
        "n_images": len(samples),
        "resolution": resolution,
    }
    return summary, table


# ---------------------------------------------------------------------------
# End-to-end training
# ---------------------------------------------------------------------------

def _sigma_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Linear decay from sigma_init to sigma_min across the run."""
    if cfg.total_epochs == 1:
        return cfg.sigma_min
    frac = epoch / (cfg.total_epochs - 1)
    return cfg.sigma_init + (cfg.sigma_min - cfg.sigma_init) * frac


def _validate_soft(state: LearnerState, samples, batch: int = 32) -> Array:
    """Per-landmark validation error under the coordinate-regression
    mode's own spatial-softmax decode."""
    n_lm = state.arch.n_landmarks
    preds, gts = [], []
    with nk.no_grad():
        for start in range(0, len(samples), batch):
            chosen = samples[start:start + batch]
            images = np.stack([s.image for s in chosen])
            coords = soft_argmax_decode_batch(forward(state, images)).data
            preds.append(coords.reshape(len(chosen), n_lm, 2))
            gts.append(np.stack([s.landmarks.coords for s in chosen]))
    table = radial_errors(np.concatenate(preds), np.concatenate(gts), 1.0)
    return mre(table).per_landmark


def run_training(cfg: TrainConfig, data: DatasetSplit, out_dir: str | Path | None = None,
                 progress=None, extra_echo: dict | None = None) -> RunArtifacts:
    """Train in one of the four modes and evaluate on the test split.

    Writes the run-directory layout when ``out_dir`` is given. ``progress``
    receives one line per lineage epoch.
    """
    cfg.validate_schedule()
    if not (data.train and data.validation and data.test):
        raise ConfigurationError("run_training: all three splits must be non-empty")
    say = progress if progress is not None else lambda line: None
    t0 = time.perf_counter()

    sample0 = data.train[0]
    n_lm = len(sample0.landmarks)
    arch = Architecture(height=sample0.height, width=sample0.width,
                        n_landmarks=n_lm, widths=cfg.widths)
    state = build_learner(arch, cfg.seed)
    echo = cfg.echo()
    if extra_echo:
        echo.update(extra_echo)
    artifacts = RunArtifacts(config_echo=echo)
    trainer = HeatmapTrainer(state, data.train, data.validation, cfg)
    controllers: list[ControllerState] = []
    freeze_iteration: dict[int, int | None] = {i: None for i in range(n_lm)}
    warmup = cfg.resolved_warmup() if cfg.mode == "laoml" else 0

    def record_epoch(epoch: int, losses: Array, val_errors: Array) -> None:
        for i in range(n_lm):
            artifacts.epoch_rows.append(
                (epoch, i, float(losses[i]), float(val_errors[i])))
        say(f"epoch={epoch} mean_val_mre={float(np.mean(val_errors)):.6f}")

    if cfg.mode == "laoml":
        for i in range(n_lm):
            child = int(np.random.SeedSequence(
                (cfg.seed, _STREAM_CONTROLLER, i)).generate_state(1)[0])
            controllers.append(build_controller(child, input_dim=cfg.t_prime,
                                                eta=cfg.controller_lr))
        sigmas = np.full(n_lm, float(cfg.sigma_init))
        for i in range(n_lm):
            artifacts.sigma_rows.append((0, i, float(sigmas[i])))
        for epoch in range(warmup):
            losses, val_errors = trainer.train_block(sigmas, [epoch], 0)
            for i, ctrl in enumerate(controllers):
                push_history(ctrl, losses[0][i])
            record_epoch(epoch, losses[0], val_errors[0])
        warmup_done = time.perf_counter()

        loop = LoopState(cfg=cfg, trainer=trainer, controllers=controllers,
                         sigmas=sigmas,
                         early=EarlyStopState(n_lm, cfg.t_prime), epoch=warmup)
        for _ in range(cfg.n_iterations()):
            iteration = loop.iteration
            result = run_iteration(loop)
            for record in result.reward_records:
                artifacts.reward_rows.append(
                    (iteration, record.sample, record.landmark,
                     record.epsilon, record.reward))
            for i in range(n_lm):
                artifacts.sigma_rows.append((iteration + 1, i, float(loop.sigmas[i])))
            for offset, (losses, val_errors) in enumerate(
                    zip(result.winner_losses, result.winner_val_errors)):
                record_epoch(warmup + iteration * cfg.t_prime + offset, losses, val_errors)
            for i in result.newly_frozen:
                freeze_iteration[i] = iteration
        trainer = loop.trainer
        state = trainer.state
        sigmas_final = loop.sigmas
        train_done = time.perf_counter()
        artifacts.timings["warmup_s"] = warmup_done - t0
        artifacts.timings["iterations_s"] = train_done - warmup_done
    else:
        sigmas_final = np.full(n_lm, float(cfg.sigma_init))
        for epoch in range(cfg.total_epochs):
            rng = derive_rng(cfg.seed, _STREAM_TRAIN, epoch, 0)
            if cfg.mode == "coordreg":
                _, losses = train_coordreg(state, data.train, 1, cfg.learner_lr,
                                           cfg.batch, rng, trainer.augment_fn)
                val_errors = _validate_soft(state, data.validation)
            else:
                if cfg.mode == "decay":
                    sigmas_final = np.full(n_lm, _sigma_schedule(cfg, epoch))
                _, losses = train_epochs(state, data.train, sigmas_final, 1,
                                         cfg.learner_lr, cfg.batch, rng,
                                         trainer.augment_fn)
                val_errors = validate(state, data.validation)
            for i in range(n_lm):
                artifacts.sigma_rows.append((epoch, i, float(sigmas_final[i])))
            record_epoch(epoch, losses[0], val_errors)
        train_done = time.perf_counter()
        artifacts.timings["train_s"] = train_done - t0

    summary, _table = evaluate_state(state, data.test, cfg.resolution,
                                     cfg.pck_thresholds,
                                     decode="soft" if cfg.mode == "coordreg" else "argmax")
    summary["mode"] = cfg.mode
    summary["seed"] = cfg.seed
    summary["final_sigma"] = [float(s) for s in sigmas_final]
    summary["freeze_iteration"] = {str(i): freeze_iteration[i] for i in range(n_lm)}
    artifacts.summary = summary
    artifacts.timings["evaluate_s"] = time.perf_counter() - train_done
    artifacts.timings["total_s"] = time.perf_counter() - t0

    if out_dir is not None:
        out = Path(out_dir)
        artifacts.save(out)
        save_learner(out / "learner.ckpt", state)
        if cfg.mode == "laoml":
            params = []
            for i, ctrl in enumerate(controllers):
                for name, tensor in ctrl.params.items():
                    params.append((f"c{i}_{name}", tensor.data))
            write_checkpoint(out / "controllers.ckpt", "controllers",
                             {"n_controllers": n_lm,
                              "input_dim": cfg.t_prime,
                              "frozen": [bool(c.frozen) for c in controllers]},
                             params)
    return artifacts
