"""Contrastive and self-distillation objectives over batch similarity matrices.

Each loss has a plain forward (which accepts stacked leading axes, for
gradient checking) and a ``*_grads`` companion returning closed-form gradients
with respect to the embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import gradcore as gc
from .errors import ContractError, ParameterError, ShapeError
from .gradcore import Tensor

CLIP_SCALE = 1.0 / 0.07


class Modality(str, Enum):
    SPEECH = "speech"
    TEXT = "text"


class LossMode(str, Enum):
    PAPER_ONE_DIRECTIONAL = "paper_one_directional"
    SYMMETRIC = "symmetric"


@dataclass
class SimilarityMatrix:
    data: Tensor
    row_modality: Modality = Modality.SPEECH
    col_modality: Modality = Modality.TEXT
    scale: float = 1.0

    @property
    def T(self) -> "SimilarityMatrix":
        return SimilarityMatrix(np.swapaxes(self.data, -1, -2), self.col_modality,
                                self.row_modality, self.scale)


@dataclass(frozen=True)
class DistillTemperatures:
    eps_s: float = CLIP_SCALE
    eps_t: float = CLIP_SCALE
    teacher_scale: float = CLIP_SCALE

    def __post_init__(self):
        for name in ("eps_s", "eps_t", "teacher_scale"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")


def _data(m) -> Tensor:
    return m.data if isinstance(m, SimilarityMatrix) else np.asarray(m, dtype=np.float64)


def _batch_sizes_match(a: Tensor, b: Tensor) -> None:
    if a.shape[-2] != b.shape[-2]:
        raise ShapeError(f"batch sizes differ: {a.shape[-2]} vs {b.shape[-2]}")
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")


def similarity_matrix(a: Tensor, b: Tensor, scale: float = 1.0,
                      row_modality: Modality = Modality.SPEECH,
                      col_modality: Modality = Modality.TEXT) -> SimilarityMatrix:
    """``data[i, j] = scale * <a_i, b_j>``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _batch_sizes_match(a, b)
    return SimilarityMatrix(scale * gc.matmul(a, np.swapaxes(b, -1, -2)),
                            row_modality, col_modality, scale)


# --------------------------------------------------------------------------
# InfoNCE


def _check_tau(tau) -> Tensor:
    tau = np.asarray(tau, dtype=np.float64)
    if not np.all(tau > 0):
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def info_nce(z_speech: Tensor, z_text: Tensor, tau, mode: LossMode | str = LossMode.SYMMETRIC):
    """Batch InfoNCE with matched pairs on the diagonal.

    ``paper_one_directional`` keeps only the speech-to-text term; ``symmetric``
    averages it with the text-to-speech mirror.
    """
    mode = LossMode(mode)
    tau = _check_tau(tau)
    sims = similarity_matrix(z_speech, z_text).data
    logits = sims / tau[..., None, None]
    s2t = -gc.ordered_mean(np.diagonal(gc.log_softmax_rows(logits), axis1=-2, axis2=-1), -1)
    if mode is LossMode.PAPER_ONE_DIRECTIONAL:
        loss = s2t
    else:
        t2s = -gc.ordered_mean(
            np.diagonal(gc.log_softmax_rows(np.swapaxes(logits, -1, -2)), axis1=-2, axis2=-1), -1
        )
        loss = 0.5 * (s2t + t2s)
    loss = loss + 0.0  # turn -0.0 into 0.0
    return float(loss) if np.ndim(loss) == 0 else loss


def info_nce_grads(z_speech: Tensor, z_text: Tensor, tau: float,
                   mode: LossMode | str = LossMode.SYMMETRIC):
    """Return ``(loss, dL/dz_speech, dL/dz_text, dL/dtau)`` for an unstacked batch."""
    mode = LossMode(mode)
    tau = float(_check_tau(tau))
    zs = np.asarray(z_speech, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    n = zs.shape[0]
    sims = similarity_matrix(zs, zt).data
    logits = sims / tau
    eye = np.eye(n)

    log_rows = gc.log_softmax_rows(logits)
    loss = -gc.ordered_mean(np.diagonal(log_rows))
    g_logits = (np.exp(log_rows) - eye) / n
    if mode is LossMode.SYMMETRIC:
        log_cols = gc.log_softmax_rows(logits.T)
        loss = 0.5 * (loss - gc.ordered_mean(np.diagonal(log_cols)))
        g_logits = 0.5 * (g_logits + ((np.exp(log_cols) - eye) / n).T)

    g_sims = g_logits / tau
    g_tau = -gc.ordered_sum(gc.ordered_sum(g_logits * logits, -1), -1) / tau
    g_zs = gc.matmul(g_sims, zt)
    g_zt = gc.matmul(g_sims.T, zs)
    return float(loss), g_zs, g_zt, float(g_tau)


# --------------------------------------------------------------------------
# self-distillation


def student_similarities(z_speech: Tensor, z_text: Tensor,
                         temps: DistillTemperatures) -> tuple[SimilarityMatrix, SimilarityMatrix]:
    c_s = similarity_matrix(z_speech, z_text, temps.eps_s, Modality.SPEECH, Modality.TEXT)
    c_t = similarity_matrix(z_text, z_speech, temps.eps_t, Modality.TEXT, Modality.SPEECH)
    return c_s, c_t


def teacher_target(teacher_speech: Tensor, teacher_text: Tensor,
                   teacher_scale: float) -> SimilarityMatrix:
    """Similarity matrix of frozen-teacher embeddings; detached by construction."""
    m = similarity_matrix(teacher_speech, teacher_text, teacher_scale)
    m.data = np.array(m.data, copy=True)
    m.data.setflags(write=False)
    return m


def _check_row_stochastic(x: Tensor, what: str, tol: float = 1e-9) -> None:
    sums = gc.ordered_sum(x, -1)
    if np.any(x < 0) or np.any(np.abs(sums - 1.0) > tol):
        raise ContractError(f"{what} rows must be probability vectors (row sums {sums})")


def _kl_terms(p: Tensor, log_p: Tensor, log_q: Tensor) -> Tensor:
    return np.where(p > 0, p * (log_p - log_q), 0.0)


def kl_divergence(p: Tensor, log_q: Tensor, *, normalize_by_rows: bool = False):
    """``sum_ij P_ij (log P_ij - logQ_ij)`` with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if p.shape != log_q.shape:
        raise ShapeError(f"P shape {p.shape} != logQ shape {log_q.shape}")
    _check_row_stochastic(p, "P")
    _check_row_stochastic(np.exp(log_q), "exp(logQ)")
    with np.errstate(divide="ignore"):
        log_p = np.log(np.where(p > 0, p, 1.0))
    total = gc.ordered_sum(gc.ordered_sum(_kl_terms(p, log_p, log_q), -1), -1)
    if normalize_by_rows:
        total = total / p.shape[-2]
    return float(total) if np.ndim(total) == 0 else total


def _teacher_distributions(m: Tensor, teacher_transpose: bool):
    first = gc.log_softmax_rows(m)
    second = gc.log_softmax_rows(np.swapaxes(m, -1, -2)) if teacher_transpose else first
    return first, second


def distillation_loss(c_s, c_t, m, *, teacher_transpose: bool = True,
                      normalize_by_rows: bool = False):
    """Half the sum of two KL terms pulling student row distributions toward the teacher's.

    With ``teacher_transpose`` the text-query term is compared against the
    row-softmax of ``M`` transposed so that both sides rank the same axis;
    without it ``softmax(M)`` is used for both terms.
    """
    c_s, c_t, m = _data(c_s), _data(c_t), _data(m)
    n = m.shape[-1]
    for name, x in (("C_s", c_s), ("C_t", c_t), ("M", m)):
        if x.shape[-2:] != (n, n):
            raise ShapeError(f"{name} must be {n}x{n}, got {x.shape}")
    log_p1, log_p2 = _teacher_distributions(m, teacher_transpose)
    p1, p2 = np.exp(log_p1), np.exp(log_p2)
    kl1 = _kl_terms(p1, log_p1, gc.log_softmax_rows(c_s))
    kl2 = _kl_terms(p2, log_p2, gc.log_softmax_rows(c_t))
    loss = 0.5 * (gc.ordered_sum(gc.ordered_sum(kl1, -1), -1)
                  + gc.ordered_sum(gc.ordered_sum(kl2, -1), -1))
    if normalize_by_rows:
        loss = loss / n
    return float(loss) if np.ndim(loss) == 0 else loss


def distillation_grads(z_speech: Tensor, z_text: Tensor, m, temps: DistillTemperatures, *,
                       teacher_transpose: bool = True, normalize_by_rows: bool = False):
    """Return ``(L_d, dL/dz_speech, dL/dz_text)`` for student embeddings against target ``M``."""
    zs = np.asarray(z_speech, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    c_s, c_t = student_similarities(zs, zt, temps)
    m = _data(m)
    loss = distillation_loss(c_s, c_t, m, teacher_transpose=teacher_transpose,
                             normalize_by_rows=normalize_by_rows)
    log_p1, log_p2 = _teacher_distributions(m, teacher_transpose)
    # each teacher row sums to one, so d KL(P || softmax C) / dC = softmax(C) - P
    scale = 0.5 / (m.shape[-1] if normalize_by_rows else 1)
    g_cs = scale * (gc.softmax_rows(c_s.data) - np.exp(log_p1))
    g_ct = scale * (gc.softmax_rows(c_t.data) - np.exp(log_p2))
    g_zs = temps.eps_s * gc.matmul(g_cs, zt) + temps.eps_t * gc.matmul(g_ct.T, zt)
    g_zt = temps.eps_s * gc.matmul(g_cs.T, zs) + temps.eps_t * gc.matmul(g_ct, zs)
    return loss, g_zs, g_zt
