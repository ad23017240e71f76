"""Reference rounds for classical error feedback, full step-ahead EF and FedAvg.

These are written out separately from the protocol module so the special
cases α ≡ 0 and α ≡ 1 can be compared against them bit for bit. They use the
same minibatch streams and the same client-order summation.
"""
from typing import List, Sequence, Tuple

import numpy as np

from app.constants import Purpose
from app.models.models import FederatedTask
from app.schemas.experiment import CompressorSpec
from app.services.compressors import compress
from app.services.numerics import RandomStream
from app.services.objectives import stochastic_grad


def _local_steps(
    task: FederatedTask,
    k: int,
    w: np.ndarray,
    r: int,
    local_lr: float,
    local_steps: int,
    batch_size: int,
    stream: RandomStream,
) -> np.ndarray:
    batch = min(batch_size, task.clients[k].n)
    for t in range(local_steps):
        grad = stochastic_grad(task, k, w, batch, stream.at(round=r, client=k, step=t, purpose=Purpose.MINIBATCH))
        w = w - local_lr * grad
    return w


def _apply(w: np.ndarray, sent: Sequence[np.ndarray], server_lr: float) -> np.ndarray:
    total = sent[0].copy()
    for v in sent[1:]:
        total = total + v
    return w - server_lr * (total / len(sent))


def fed_ef_round(
    task: FederatedTask,
    w: np.ndarray,
    residuals: List[np.ndarray],
    participants: Tuple[int, ...],
    r: int,
    server_lr: float,
    local_lr: float,
    local_steps: int,
    batch_size: int,
    compressor: CompressorSpec,
    stream: RandomStream,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Local SGD from w, send C(e + g), keep e + g − C(e + g)."""
    residuals = list(residuals)
    sent = []
    for k in sorted(participants):
        g = w - _local_steps(task, k, w, r, local_lr, local_steps, batch_size, stream)
        u = residuals[k] + g
        c = compress(compressor, u).dense
        residuals[k] = u - c
        sent.append(c)
    return _apply(w, sent, server_lr), residuals


def saef_round(
    task: FederatedTask,
    w: np.ndarray,
    residuals: List[np.ndarray],
    participants: Tuple[int, ...],
    r: int,
    server_lr: float,
    local_lr: float,
    local_steps: int,
    batch_size: int,
    compressor: CompressorSpec,
    stream: RandomStream,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Start local SGD from w − e, send C(g), keep g − C(g). No error averaging."""
    residuals = list(residuals)
    sent = []
    for k in sorted(participants):
        start = w - residuals[k]
        g = start - _local_steps(task, k, start, r, local_lr, local_steps, batch_size, stream)
        c = compress(compressor, g).dense
        residuals[k] = g - c
        sent.append(c)
    return _apply(w, sent, server_lr), residuals


def fedavg_round(
    task: FederatedTask,
    w: np.ndarray,
    participants: Tuple[int, ...],
    r: int,
    server_lr: float,
    local_lr: float,
    local_steps: int,
    batch_size: int,
    stream: RandomStream,
) -> np.ndarray:
    sent = [
        w - _local_steps(task, k, w, r, local_lr, local_steps, batch_size, stream) for k in sorted(participants)
    ]
    return _apply(w, sent, server_lr)
