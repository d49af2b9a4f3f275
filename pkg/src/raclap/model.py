"""Dual-encoder over precomputed features.

The speech tower pools each upstream layer over time, mixes the layers with a
learnable softmax-weighted sum and projects the result; the text tower mean
pools tokens and projects. Both towers end in L2-normalized 512-d embeddings.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigurationError, DataError
from .gradcore import Parameter, Tensor

EMBED_DIM = 512
MIN_TEMPERATURE = 0.01
MAX_TEMPERATURE = 100.0


@dataclass
class LayerStack:
    """Hidden states of one utterance, shaped (layers, frames, dim)."""

    data: Tensor

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"layer stack must be L x T x D with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("layer stack contains non-finite values")

    @property
    def num_layers(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def frame_means(self) -> Tensor:
        """Per-layer time average, shape (L, D)."""
        return gc.ordered_mean(self.data, axis=1)


@dataclass
class TextFeature:
    """Token states of one caption, shaped (tokens, dim). A 1-D vector is one token."""

    data: Tensor

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[None, :]
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise DataError(f"text feature must be T' x D' with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("text feature contains non-finite values")

    @property
    def num_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def pooled(self) -> Tensor:
        return gc.ordered_mean(self.data, axis=0)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class LayerWeights:
    """Softmax-parameterized convex weights over upstream layers."""

    def __init__(self, num_layers: int, prefix: str = "speech"):
        if num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        self.logits = Parameter(f"{prefix}.layer_logits", np.zeros(num_layers))

    def __len__(self) -> int:
        return self.logits.value.shape[-1]

    def alphas(self) -> Tensor:
        return gc.softmax_rows(self.logits.value)

    def parameters(self) -> list[Parameter]:
        return [self.logits]


class ProjectionHead:
    """Linear -> ReLU -> Linear, ending at ``out_dim`` (512)."""

    def __init__(self, d_in: int, d_hidden: int | None = None, out_dim: int = EMBED_DIM,
                 *, rng: np.random.Generator | None = None, prefix: str = "head"):
        if d_in < 1:
            raise ConfigurationError("projection input dim must be >= 1")
        d_hidden = d_in if d_hidden is None else int(d_hidden)
        if d_hidden < 1:
            raise ConfigurationError("projection hidden dim must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        self.W1 = Parameter(f"{prefix}.W1", _glorot(rng, d_in, d_hidden))
        self.b1 = Parameter(f"{prefix}.b1", np.zeros(d_hidden))
        self.W2 = Parameter(f"{prefix}.W2", _glorot(rng, d_hidden, out_dim))
        self.b2 = Parameter(f"{prefix}.b2", np.zeros(out_dim))

    @property
    def d_in(self) -> int:
        return self.W1.value.shape[-2]

    @property
    def d_hidden(self) -> int:
        return self.W1.value.shape[-1]

    @property
    def out_dim(self) -> int:
        return self.W2.value.shape[-1]

    def parameters(self) -> list[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, x: Tensor) -> tuple[Tensor, tuple]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ConfigurationError(f"projection expects input dim {self.d_in}, got {x.shape[-1]}")
        pre = gc.matmul(x, self.W1.value) + self.b1.value[..., None, :]
        hidden = gc.relu(pre)
        out = gc.matmul(hidden, self.W2.value) + self.b2.value[..., None, :]
        return out, (x, pre, hidden)

    def backward(self, g_out: Tensor, cache: tuple) -> Tensor:
        x, pre, hidden = cache
        self.b2.accumulate(gc.ordered_sum(g_out, axis=0))
        g_hidden, g_W2 = gc.matmul_backward(g_out, hidden, self.W2.value)
        self.W2.accumulate(g_W2)
        g_pre = gc.relu_backward(g_hidden, pre)
        self.b1.accumulate(gc.ordered_sum(g_pre, axis=0))
        g_x, g_W1 = gc.matmul_backward(g_pre, x, self.W1.value)
        self.W1.accumulate(g_W1)
        return g_x


def project(head: ProjectionHead, x: Tensor) -> Tensor:
    """Project a single vector (or a batch of rows) through ``head``."""
    x = np.asarray(x, dtype=np.float64)
    out, _ = head.forward(x[None, :] if x.ndim == 1 else x)
    return out[0] if x.ndim == 1 else out


def _mix_layers(frame_means: Tensor, logits: Tensor) -> tuple[Tensor, Tensor]:
    """frame_means (N, L, D) with logits (..., L) -> (..., N, D) and the alphas."""
    alphas = gc.softmax_rows(logits)
    weighted = alphas[..., None, :, None] * frame_means
    return gc.ordered_sum(weighted, axis=-2), alphas


def aggregate_layers(stack: LayerStack, weights: LayerWeights) -> Tensor:
    if len(weights) != stack.num_layers:
        raise ConfigurationError(
            f"layer weights cover {len(weights)} layers but stack has {stack.num_layers}"
        )
    out, _ = _mix_layers(stack.frame_means()[None], weights.logits.value)
    return out[0]


class ClapModel:
    def __init__(self, num_layers: int, speech_dim: int, text_dim: int,
                 speech_hidden: int | None = None, text_hidden: int | None = None,
                 *, seed: int = 0, init_temperature: float = 0.07,
                 learn_temperature: bool = True):
        if not MIN_TEMPERATURE <= init_temperature <= MAX_TEMPERATURE:
            raise ConfigurationError(
                f"initial temperature must lie in [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )
        rng = np.random.default_rng(seed)
        self.speech_layer_weights = LayerWeights(num_layers, "speech")
        self.speech_head = ProjectionHead(speech_dim, speech_hidden, rng=rng, prefix="speech")
        self.text_head = ProjectionHead(text_dim, text_hidden, rng=rng, prefix="text")
        self.log_temperature = Parameter(
            "log_temperature", np.array([np.log(init_temperature)]), trainable=learn_temperature
        )

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return (self.speech_layer_weights.parameters() + self.speech_head.parameters()
                + self.text_head.parameters() + [self.log_temperature])

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def hyperparameters(self) -> dict:
        return {
            "num_layers": len(self.speech_layer_weights),
            "speech_dim": self.speech_head.d_in,
            "text_dim": self.text_head.d_in,
            "speech_hidden": self.speech_head.d_hidden,
            "text_hidden": self.text_head.d_hidden,
            "embed_dim": self.speech_head.out_dim,
            "learn_temperature": bool(self.log_temperature.trainable),
        }

    @classmethod
    def from_hyperparameters(cls, hp: dict) -> "ClapModel":
        if int(hp.get("embed_dim", EMBED_DIM)) != EMBED_DIM:
            raise ConfigurationError(f"embedding dim must be {EMBED_DIM}")
        return cls(int(hp["num_layers"]), int(hp["speech_dim"]), int(hp["text_dim"]),
                   int(hp["speech_hidden"]), int(hp["text_hidden"]),
                   learn_temperature=bool(hp.get("learn_temperature", True)))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ClapModel":
        return copy.deepcopy(self)

    def state(self) -> dict[str, Tensor]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, Tensor]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ConfigurationError(
                    f"{name}: expected shape {p.value.shape}, found {value.shape}"
                )
            p.value = value.copy()
            p.zero_grad()

    def digest(self) -> str:
        """SHA-256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.value[0]))

    def temperature_value(self) -> Tensor:
        """exp(log_temperature), keeping any leading stacked axis."""
        return np.exp(self.log_temperature.value[..., 0])

    def clamp_temperature(self) -> None:
        lo, hi = np.log(MIN_TEMPERATURE), np.log(MAX_TEMPERATURE)
        self.log_temperature.value = np.clip(self.log_temperature.value, lo, hi)

    # -- batched towers ------------------------------------------------------

    def check_speech_input(self, frame_means: Tensor) -> None:
        L, D = len(self.speech_layer_weights), self.speech_head.d_in
        if frame_means.ndim != 3 or frame_means.shape[1:] != (L, D):
            raise ConfigurationError(
                f"speech features: expected (N, {L}, {D}), found {frame_means.shape}"
            )

    def check_text_input(self, pooled: Tensor) -> None:
        D = self.text_head.d_in
        if pooled.ndim != 2 or pooled.shape[1] != D:
            raise ConfigurationError(f"text features: expected (N, {D}), found {pooled.shape}")

    def forward_speech(self, frame_means: Tensor) -> tuple[Tensor, tuple]:
        """frame_means (N, L, D) -> unit embeddings (N, 512) plus backward cache."""
        frame_means = np.asarray(frame_means, dtype=np.float64)
        self.check_speech_input(frame_means)
        mixed, alphas = _mix_layers(frame_means, self.speech_layer_weights.logits.value)
        projected, head_cache = self.speech_head.forward(mixed)
        z = gc.l2_normalize_rows(projected)
        return z, (frame_means, alphas, head_cache, z, gc.row_norms(projected))

    def backward_speech(self, g_z: Tensor, cache: tuple) -> None:
        frame_means, alphas, head_cache, z, norms = cache
        g_proj = gc.l2_normalize_rows_backward(g_z, z, norms)
        g_mixed = self.speech_head.backward(g_proj, head_cache)
        # d/d alpha_l = sum_n sum_d g[n, d] * mean[n, l, d]
        g_alpha = gc.ordered_sum(gc.ordered_sum(g_mixed[:, None, :] * frame_means, -1), 0)
        self.speech_layer_weights.logits.accumulate(gc.softmax_rows_backward(g_alpha, alphas))

    def forward_text(self, pooled: Tensor) -> tuple[Tensor, tuple]:
        """pooled token means (N, D') -> unit embeddings (N, 512) plus backward cache."""
        pooled = np.asarray(pooled, dtype=np.float64)
        self.check_text_input(pooled)
        projected, head_cache = self.text_head.forward(pooled)
        z = gc.l2_normalize_rows(projected)
        return z, (head_cache, z, gc.row_norms(projected))

    def backward_text(self, g_z: Tensor, cache: tuple) -> None:
        head_cache, z, norms = cache
        self.text_head.backward(gc.l2_normalize_rows_backward(g_z, z, norms), head_cache)

    def embed_speech(self, frame_means: Tensor) -> Tensor:
        return self.forward_speech(frame_means)[0]

    def embed_text(self, pooled: Tensor) -> Tensor:
        return self.forward_text(pooled)[0]


def encode_speech(model: "ClapModel | TeacherSnapshot", stack: LayerStack) -> Tensor:
    model = _as_model(model)
    if stack.num_layers != len(model.speech_layer_weights) or stack.dim != model.speech_head.d_in:
        raise ConfigurationError(
            f"speech stack has L={stack.num_layers}, D={stack.dim}; model expects "
            f"L={len(model.speech_layer_weights)}, D={model.speech_head.d_in}"
        )
    return model.embed_speech(stack.frame_means()[None])[0]


def encode_text(model: "ClapModel | TeacherSnapshot", feat: TextFeature) -> Tensor:
    model = _as_model(model)
    if feat.dim != model.text_head.d_in:
        raise ConfigurationError(
            f"text feature has D'={feat.dim}; model expects D'={model.text_head.d_in}"
        )
    return model.embed_text(feat.pooled()[None])[0]


class TeacherSnapshot:
    """Frozen copy of a model. Its arrays are read-only and never receive gradients."""

    def __init__(self, model: ClapModel):
        self._hp = model.hyperparameters()
        self._model = model.copy()
        for p in self._model.parameters():
            p.trainable = False
            p.zero_grad()
            p.value.setflags(write=False)
            p.grad.setflags(write=False)
        self.source_digest = self._model.digest()

    @property
    def model(self) -> ClapModel:
        return self._model

    def parameters(self) -> list[Parameter]:
        return self._model.parameters()

    def digest(self) -> str:
        return self._model.digest()

    def hyperparameters(self) -> dict:
        return dict(self._hp)

    def embed_speech(self, frame_means: Tensor) -> Tensor:
        return self._model.embed_speech(frame_means)

    def embed_text(self, pooled: Tensor) -> Tensor:
        return self._model.embed_text(pooled)

    def make_student(self) -> ClapModel:
        """Fresh trainable model initialized with the teacher's parameters."""
        student = self._model.copy()
        for p in student.parameters():
            p.value = np.array(p.value, dtype=np.float64)
            p.trainable = p.name != "log_temperature" or self._hp["learn_temperature"]
            p.zero_grad()
        return student


def _as_model(model) -> ClapModel:
    return model.model if isinstance(model, TeacherSnapshot) else model


def snapshot_teacher(model: ClapModel) -> TeacherSnapshot:
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)):
            raise DataError(f"cannot snapshot: {p.name} has non-finite values")
    return TeacherSnapshot(model)
