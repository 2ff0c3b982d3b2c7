"""Global and local InfoNCE objectives with a FIFO negative queue."""
from __future__ import annotations

from dataclasses import dataclass

import torch

UNIT_TOL = 1e-4


class NegativeQueue:
    """FIFO buffer of unit vectors used as extra contrastive negatives.

    Stored entries are detached copies; nothing pushed here ever receives
    gradient.
    """

    def __init__(self, capacity: int = 512, dim: int | None = None, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.dtype = dtype
        self.entries = torch.zeros(0, dim or 0, dtype=dtype)
        self.total_pushed = 0

    def __len__(self):
        return self.entries.shape[0]

    @property
    def write_cursor(self):
        return self.total_pushed % self.capacity

    def push(self, vectors):
        vectors = torch.as_tensor(vectors)
        if vectors.numel() == 0:
            return self
        if vectors.dim() == 1:
            vectors = vectors[None]
        norms = torch.linalg.vector_norm(vectors.detach().double(), dim=1)
        if ((norms - 1.0).abs() > UNIT_TOL).any():
            raise ValueError("queue entries must be unit vectors")
        if self.dim is None:
            self.dim = vectors.shape[1]
            self.entries = torch.zeros(0, self.dim, dtype=self.dtype)
        if vectors.shape[1] != self.dim:
            raise ValueError(f"vector dim {vectors.shape[1]} != queue dim {self.dim}")
        stored = vectors.detach().clone().to(self.entries.dtype)
        self.entries = torch.cat([self.entries, stored])[-self.capacity:]
        self.total_pushed += vectors.shape[0]
        return self

    def state(self):
        return {"entries": self.entries.numpy().copy(), "total_pushed": self.total_pushed,
                "capacity": self.capacity}

    @classmethod
    def from_state(cls, state):
        entries = torch.as_tensor(state["entries"]).clone()
        q = cls(int(state["capacity"]), dtype=entries.dtype)
        q.entries = entries
        q.dim = q.entries.shape[1] if q.entries.numel() else None
        q.total_pushed = int(state["total_pushed"])
        return q


def queue_push(queue: NegativeQueue, vectors) -> NegativeQueue:
    return queue.push(vectors)


def local_positive_index(anchor, paired):
    """Index of the most cosine-similar paired location for every anchor location."""
    a = anchor.reshape(*anchor.shape[:-3], -1, anchor.shape[-1])
    p = paired.reshape(*paired.shape[:-3], -1, paired.shape[-1])
    return (a @ p.transpose(-2, -1)).argmax(dim=-1)


def local_contrastive_loss(anchor_grid, paired_grid, tau: float = 0.07, positive: str = "search"):
    """Dense InfoNCE between two ``(S, S, K)`` (or batched) unit-vector grids.

    With ``positive="search"`` each anchor location's positive is the paired
    location of highest cosine similarity (first index on ties); with
    ``"same_index"`` it is the co-located vector. Every other paired location
    is a negative.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if anchor_grid.shape != paired_grid.shape:
        raise ValueError(f"grid shapes differ: {tuple(anchor_grid.shape)} vs {tuple(paired_grid.shape)}")
    a = anchor_grid.reshape(*anchor_grid.shape[:-3], -1, anchor_grid.shape[-1])
    p = paired_grid.reshape(*paired_grid.shape[:-3], -1, paired_grid.shape[-1])
    logits = a @ p.transpose(-2, -1) / tau
    n = logits.shape[-1]
    if positive == "search":
        pos_idx = logits.detach().argmax(dim=-1)
    elif positive == "same_index":
        pos_idx = torch.arange(n, device=logits.device).expand(logits.shape[:-1])
    else:
        raise ValueError(f"unknown positive selection {positive!r}")
    pos = logits.gather(-1, pos_idx[..., None])[..., 0]
    return (torch.logsumexp(logits, dim=-1) - pos).mean()


def global_contrastive_loss(anchors, positives, batch_negatives=None, queue: NegativeQueue | None = None,
                            tau: float = 0.07):
    """MoCo-style InfoNCE over ``N`` aligned (anchor, positive) unit vectors.

    Denominator per anchor: its positive, the other anchors in the batch,
    every ``batch_negatives`` row, and every queue entry.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if anchors.dim() != 2 or anchors.shape[0] == 0:
        raise ValueError("anchors must be a non-empty (N, d) tensor")
    if positives.shape != anchors.shape:
        raise ValueError("anchors and positives must be index-aligned")
    N = anchors.shape[0]
    pos = (anchors * positives).sum(-1, keepdim=True) / tau
    parts = [pos]
    if N > 1:
        same = anchors @ anchors.t() / tau
        off_diag = ~torch.eye(N, dtype=torch.bool, device=anchors.device)
        parts.append(same[off_diag].reshape(N, N - 1))
    if batch_negatives is not None and len(batch_negatives):
        parts.append(anchors @ batch_negatives.t() / tau)
    if queue is not None and len(queue):
        parts.append(anchors @ queue.entries.to(anchors.dtype).t() / tau)
    logits = torch.cat(parts, dim=1)
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


@dataclass
class ContrastiveBatch:
    """Student projections of the four views, index-aligned across views.

    ``local_*`` are ``(N, S, S, K)``; ``global_*`` are ``(N, d)``.
    """
    local_s: torch.Tensor
    local_s2t: torch.Tensor
    local_t: torch.Tensor
    local_t2s: torch.Tensor
    global_s: torch.Tensor
    global_s2t: torch.Tensor
    global_t: torch.Tensor
    global_t2s: torch.Tensor
    tau: float = 0.07


def local_loss(batch: ContrastiveBatch, positive="search"):
    src = local_contrastive_loss(batch.local_s, batch.local_t2s, batch.tau, positive)
    tgt = local_contrastive_loss(batch.local_t, batch.local_s2t, batch.tau, positive)
    return 0.5 * (src + tgt)


def global_loss(batch: ContrastiveBatch, queue=None):
    src = global_contrastive_loss(batch.global_s, batch.global_s2t, batch.global_t2s, queue, batch.tau)
    tgt = global_contrastive_loss(batch.global_t, batch.global_t2s, batch.global_s2t, queue, batch.tau)
    return 0.5 * (src + tgt)


def glcl_loss(batch: ContrastiveBatch, queue: NegativeQueue | None, lambda_mix: float = 0.5,
              teacher_vectors=None, positive="search"):
    """``lambda * global + (1 - lambda) * local``; then enqueue ``teacher_vectors``."""
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError("lambda_mix must be in [0, 1]")
    loss = lambda_mix * global_loss(batch, queue) + (1.0 - lambda_mix) * local_loss(batch, positive)
    if queue is not None and teacher_vectors is not None:
        queue.push(teacher_vectors)
    return loss
