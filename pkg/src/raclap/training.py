"""Two-stage trainer: contrastive pretraining, then self-distillation from a frozen teacher."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import gradcore as gc
from . import losses
from .dataio import PairedFeatures
from .errors import ConfigurationError, DataError, DivergenceError
from .gradcore import Parameter
from .losses import DistillTemperatures, LossMode
from .model import MAX_TEMPERATURE, MIN_TEMPERATURE, ClapModel, TeacherSnapshot

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.99
    adam_epsilon: float = 1e-8
    batch_size: int = 192
    epochs: int = 15
    seed: int = 0
    loss_mode: LossMode = LossMode.SYMMETRIC
    temperatures: DistillTemperatures = field(default_factory=DistillTemperatures)
    balanced_sampling: bool = True
    # empty means every tag present in the data
    dataset_tags: tuple[str, ...] = ()
    teacher_transpose: bool = True
    normalize_by_rows: bool = False
    grad_clip: float | None = None
    early_stop_tolerance: float | None = None

    def __post_init__(self):
        self.loss_mode = LossMode(self.loss_mode)
        self.dataset_tags = tuple(self.dataset_tags)
        if isinstance(self.temperatures, Mapping):
            self.temperatures = DistillTemperatures(**self.temperatures)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.adam_epsilon <= 0:
            raise ConfigurationError("adam_epsilon must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for contrastive training")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Iterable[Parameter]) -> "AdamState":
        params = list(params)
        return cls(0, {p.name: np.zeros_like(p.value) for p in params},
                   {p.name: np.zeros_like(p.value) for p in params})

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdamState":
        return cls(int(d["t"]), {k: np.array(v) for k, v in d["m"].items()},
                   {k: np.array(v) for k, v in d["v"].items()})


def adam_step(params: Sequence[Parameter], state: AdamState, cfg: TrainConfig,
              grads: Mapping[str, np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update in place. Frozen parameters are left alone."""
    grads = {p.name: p.grad for p in params} if grads is None else grads
    for p in params:
        if p.trainable and not np.all(np.isfinite(grads[p.name])):
            raise DivergenceError(f"non-finite gradient for {p.name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.value = p.value - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)
        if p.name == "log_temperature":
            p.value = np.clip(p.value, math.log(MIN_TEMPERATURE), math.log(MAX_TEMPERATURE))
    return state


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale trainable grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    trainable = [p for p in params if p.trainable]
    sq = [gc.ordered_sum(p.grad.reshape(-1) ** 2) for p in trainable]
    norm = float(np.sqrt(gc.ordered_sum(np.array(sq)))) if sq else 0.0
    if norm > max_norm:
        for p in trainable:
            p.grad = p.grad * (max_norm / norm)
    return norm


# --------------------------------------------------------------------------
# sampling


@dataclass
class BatchPlan:
    indices: list[int]
    tags: list[str]
    quota: dict[str, int]


def _active_groups(groups: Mapping[str, Sequence[int]], cfg: TrainConfig) -> dict[str, list[int]]:
    wanted = cfg.dataset_tags or tuple(sorted(groups))
    active = {}
    for tag in sorted(wanted):
        members = list(groups.get(tag, ()))
        if not members:
            raise DataError(f"dataset tag {tag!r} has no samples")
        active[tag] = members
    return active


def balanced_batches(groups: Mapping[str, Sequence[int]], cfg: TrainConfig,
                     epoch: int) -> list[BatchPlan]:
    """Plan one epoch of batches from ``tag -> sample indices``.

    Balanced: every batch takes ``batch_size / K`` samples from each of the K
    active tags. The epoch runs until the largest tag has been seen once (in
    shuffled order); smaller tags are drawn with replacement. Unbalanced: a
    shuffled partition of all active samples.
    """
    active = _active_groups(groups, cfg)
    rng = np.random.default_rng([cfg.seed, epoch])
    if not cfg.balanced_sampling:
        pool = [(i, tag) for tag, members in active.items() for i in members]
        order = rng.permutation(len(pool))
        plans = []
        for start in range(0, len(pool), cfg.batch_size):
            chunk = [pool[j] for j in order[start:start + cfg.batch_size]]
            quota: dict[str, int] = {}
            for _, tag in chunk:
                quota[tag] = quota.get(tag, 0) + 1
            plans.append(BatchPlan([i for i, _ in chunk], [t for _, t in chunk], quota))
        return plans

    k = len(active)
    if cfg.batch_size % k:
        raise ConfigurationError(
            f"batch_size {cfg.batch_size} is not divisible by the {k} active dataset tags"
        )
    per_tag = cfg.batch_size // k
    largest = max(len(m) for m in active.values())
    num_batches = math.ceil(largest / per_tag)
    needed = num_batches * per_tag
    streams = {}
    for tag, members in active.items():
        n = len(members)
        if n == largest:
            picks = rng.permutation(n)
            if needed > n:
                picks = np.concatenate([picks, rng.integers(0, n, needed - n)])
        else:
            picks = rng.integers(0, n, needed)
        streams[tag] = [members[j] for j in picks]
    plans = []
    for b in range(num_batches):
        idx, tags = [], []
        for tag, stream in streams.items():
            idx.extend(stream[b * per_tag:(b + 1) * per_tag])
            tags.extend([tag] * per_tag)
        plans.append(BatchPlan(idx, tags, {tag: per_tag for tag in active}))
    return plans


# --------------------------------------------------------------------------
# objectives on a model


def contrastive_objective(model: ClapModel, speech: np.ndarray, text: np.ndarray,
                          mode: LossMode | str = LossMode.SYMMETRIC):
    """InfoNCE of the model on a batch; reads parameter values afresh (stack-friendly)."""
    zs, _ = model.forward_speech(speech)
    zt, _ = model.forward_text(text)
    return losses.info_nce(zs, zt, model.temperature_value(), mode)


def contrastive_backward(model: ClapModel, speech: np.ndarray, text: np.ndarray,
                         mode: LossMode | str = LossMode.SYMMETRIC) -> float:
    """Zero grads, then fill them with d InfoNCE / d params; returns the loss."""
    model.zero_grad()
    zs, s_cache = model.forward_speech(speech)
    zt, t_cache = model.forward_text(text)
    tau = model.temperature
    loss, g_zs, g_zt, g_tau = losses.info_nce_grads(zs, zt, tau, mode)
    model.backward_speech(g_zs, s_cache)
    model.backward_text(g_zt, t_cache)
    model.log_temperature.accumulate(np.array([g_tau * tau]))
    return loss


def teacher_matrix(teacher: TeacherSnapshot, speech: np.ndarray, text: np.ndarray,
                   teacher_scale: float) -> losses.SimilarityMatrix:
    return losses.teacher_target(teacher.embed_speech(speech), teacher.embed_text(text),
                                 teacher_scale)


def distill_objective(student: ClapModel, speech: np.ndarray, text: np.ndarray,
                      target: losses.SimilarityMatrix, cfg: TrainConfig):
    zs, _ = student.forward_speech(speech)
    zt, _ = student.forward_text(text)
    c_s, c_t = losses.student_similarities(zs, zt, cfg.temperatures)
    return losses.distillation_loss(c_s, c_t, target, teacher_transpose=cfg.teacher_transpose,
                                    normalize_by_rows=cfg.normalize_by_rows)


def distill_backward(student: ClapModel, speech: np.ndarray, text: np.ndarray,
                     target: losses.SimilarityMatrix, cfg: TrainConfig) -> float:
    student.zero_grad()
    zs, s_cache = student.forward_speech(speech)
    zt, t_cache = student.forward_text(text)
    loss, g_zs, g_zt = losses.distillation_grads(
        zs, zt, target, cfg.temperatures,
        teacher_transpose=cfg.teacher_transpose, normalize_by_rows=cfg.normalize_by_rows)
    student.backward_speech(g_zs, s_cache)
    student.backward_text(g_zt, t_cache)
    return loss


# --------------------------------------------------------------------------
# loops


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    steps: int

    def to_line(self) -> str:
        return f"{self.epoch}\t{self.mean_loss:.10f}\t{self.wall_time:.3f}"


@dataclass
class TrainResult:
    model: ClapModel
    log: list[EpochRecord]
    optimizer: AdamState
    steps: int

    @property
    def losses(self) -> list[float]:
        return [r.mean_loss for r in self.log]


EpochCallback = Callable[[EpochRecord, ClapModel, AdamState], None]


def _run(model: ClapModel, data: PairedFeatures, cfg: TrainConfig,
         step_loss: Callable[[list[int]], float], stage: str,
         on_epoch: EpochCallback | None) -> TrainResult:
    if len(data) == 0:
        raise DataError("training data is empty")
    params = model.parameters()
    state = AdamState.for_parameters(params)
    groups = data.groups()
    history: list[EpochRecord] = []
    steps = 0
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        batch_losses = []
        epoch_steps = 0
        for b, plan in enumerate(balanced_batches(groups, cfg, epoch)):
            if len(plan.indices) < 2:
                # a single pair has no negatives
                continue
            loss = step_loss(plan.indices)
            if not math.isfinite(loss):
                raise DivergenceError(f"{stage}: non-finite loss at epoch {epoch}, batch {b}")
            batch_losses.append(loss)
            if cfg.early_stop_tolerance is not None and loss < cfg.early_stop_tolerance:
                continue
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            try:
                adam_step(params, state, cfg)
            except DivergenceError as exc:
                raise DivergenceError(f"{stage}: epoch {epoch}, batch {b}: {exc}") from None
            epoch_steps += 1
        steps += epoch_steps
        mean = float(gc.ordered_mean(np.array(batch_losses))) if batch_losses else 0.0
        record = EpochRecord(epoch, mean, time.perf_counter() - started, epoch_steps)
        history.append(record)
        log.info("%s epoch %d loss %.6f", stage, epoch, mean)
        if on_epoch is not None:
            on_epoch(record, model, state)
    return TrainResult(model, history, state, steps)


def _check_dims(model: ClapModel, data: PairedFeatures) -> None:
    model.check_speech_input(data.speech)
    model.check_text_input(data.text)


def train_pretrain(model: ClapModel, data: PairedFeatures, cfg: TrainConfig,
                   on_epoch: EpochCallback | None = None) -> TrainResult:
    """Stage 1: InfoNCE over balanced batches, updated with Adam. Mutates ``model``."""
    _check_dims(model, data)

    def step(idx: list[int]) -> float:
        return contrastive_backward(model, data.speech[idx], data.text[idx], cfg.loss_mode)

    return _run(model, data, cfg, step, "pretrain", on_epoch)


def train_distill(teacher: TeacherSnapshot, student: ClapModel, data: PairedFeatures,
                  cfg: TrainConfig, on_epoch: EpochCallback | None = None) -> TrainResult:
    """Stage 2: pull the student's similarity distributions toward the frozen teacher's."""
    _check_dims(student, data)
    if teacher.hyperparameters() != student.hyperparameters():
        raise ConfigurationError("teacher and student architectures differ")
    before = teacher.digest()

    def step(idx: list[int]) -> float:
        speech, text = data.speech[idx], data.text[idx]
        target = teacher_matrix(teacher, speech, text, cfg.temperatures.teacher_scale)
        return distill_backward(student, speech, text, target, cfg)

    result = _run(student, data, cfg, step, "distill", on_epoch)
    if teacher.digest() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return result

