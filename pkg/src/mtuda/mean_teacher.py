"""Mean-Teacher self-training: EMA updates, entropy-filtered pseudo-labels, Dice losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

DICE_EPS = 1.0


@dataclass(frozen=True)
class EmaSchedule:
    alpha_start: float = 0.99
    alpha_end: float = 0.999
    warmup_steps: int = 1000

    def __post_init__(self):
        if not 0 <= self.alpha_start <= self.alpha_end < 1:
            raise ValueError("need 0 <= alpha_start <= alpha_end < 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def alpha(self, step: int) -> float:
        """Linear ramp from alpha_start to alpha_end, then constant."""
        if self.warmup_steps == 0 or step >= self.warmup_steps:
            return self.alpha_end
        return self.alpha_start + (self.alpha_end - self.alpha_start) * step / self.warmup_steps


def _ema_tensors(teacher: nn.Module, student: nn.Module):
    t_state = dict(teacher.named_parameters())
    t_state.update(teacher.named_buffers())
    s_state = dict(student.named_parameters())
    s_state.update(student.named_buffers())
    if t_state.keys() != s_state.keys():
        diff = sorted(set(t_state) ^ set(s_state))
        raise ValueError(f"teacher/student parameter names differ: {diff[:5]}")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        yield t, s


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    pairs = list(_ema_tensors(teacher, student))
    for t, s in pairs:
        if t.is_floating_point():
            t.copy_(alpha * t + (1.0 - alpha) * s)
        else:
            t.copy_(s)
    teacher.step_count = getattr(teacher, "step_count", 0) + 1
    return teacher


def pixel_entropy(prob: torch.Tensor) -> torch.Tensor:
    """Natural-log entropy over the class axis (dim -3); 0 log 0 = 0."""
    if prob.dim() < 3:
        raise ValueError("expected (..., C, H, W) probabilities")
    if (prob < -1e-6).any() or (prob > 1 + 1e-6).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return (-torch.xlogy(prob, prob).sum(dim=-3)).clamp_min(0.0)


@dataclass
class PseudoLabel:
    labels: torch.Tensor
    valid: torch.Tensor
    keep_fraction: float


def make_pseudo_labels(prob: torch.Tensor, keep_fraction: float = 0.8) -> PseudoLabel:
    """Argmax labels; the floor(keep_fraction * H * W) lowest-entropy pixels are valid.

    Ranking is per image. Equal entropies keep row-major order (stable sort).
    Accepts ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in [0, 1]")
    prob = prob.detach()
    batched = prob.dim() == 4
    p = prob if batched else prob[None]
    B, C, H, W = p.shape
    labels = p.argmax(dim=1)
    ent = pixel_entropy(p).reshape(B, H * W)
    k = int(math.floor(keep_fraction * H * W + 1e-9))
    order = torch.sort(ent, dim=1, stable=True).indices
    valid = torch.zeros(B, H * W, dtype=torch.bool, device=p.device)
    valid.scatter_(1, order[:, :k], True)
    valid = valid.reshape(B, H, W)
    if not batched:
        labels, valid = labels[0], valid[0]
    return PseudoLabel(labels, valid, keep_fraction)


def dice_loss(pred_prob: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None,
              eps: float = DICE_EPS) -> torch.Tensor:
    """Smoothed soft Dice loss averaged over foreground classes.

    Per class ``1 - 2 (sum p y + eps) / (sum p + sum y + 2 eps)`` with sums over
    all (valid) pixels of the batch. Shapes: ``(C, H, W)`` / ``(H, W)`` or
    batched ``(B, C, H, W)`` / ``(B, H, W)``.
    """
    if pred_prob.dim() == 3:
        pred_prob = pred_prob[None]
        target = target[None]
        valid = None if valid is None else valid[None]
    C = pred_prob.shape[1]
    if target.shape != pred_prob.shape[:1] + pred_prob.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match prediction {tuple(pred_prob.shape)}")
    onehot = nn.functional.one_hot(target.long(), C).permute(0, 3, 1, 2).to(pred_prob.dtype)
    if valid is not None:
        w = valid.to(pred_prob.dtype)[:, None]
        p, y = pred_prob * w, onehot * w
    else:
        p, y = pred_prob, onehot
    dims = (0, 2, 3)
    inter = (p * y).sum(dims)[1:]
    denom = p.sum(dims)[1:] + y.sum(dims)[1:]
    per_class = 1.0 - 2.0 * (inter + eps) / (denom + 2.0 * eps)
    return per_class.mean()


def consistency_loss(student_prob: torch.Tensor, pseudo: PseudoLabel) -> torch.Tensor:
    """Dice loss of the student's strong-view prediction on valid pseudo-label pixels."""
    spatial = student_prob.shape[:1] + student_prob.shape[2:] if student_prob.dim() == 4 else student_prob.shape[1:]
    if tuple(spatial) != tuple(pseudo.labels.shape):
        raise ValueError(f"student prediction {tuple(student_prob.shape)} not aligned with "
                         f"pseudo-labels {tuple(pseudo.labels.shape)}")
    return dice_loss(student_prob, pseudo.labels, pseudo.valid)
