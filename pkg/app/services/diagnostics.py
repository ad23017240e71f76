"""Per-round probes: gradient mismatch, residual energy, virtual-iterate defect, bit accounting."""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app.constants import UPLINK_BITS_LIMIT, Purpose
from app.core.errors import AccountingError, DomainError
from app.models.models import ClientState, FederatedTask, RoundTrace
from app.schemas.experiment import CompressorSpec
from app.schemas.metrics import MetricsRecord
from app.services.compressors import uplink_bits
from app.services.numerics import RandomStream, norm2_sq
from app.services.objectives import batch_grad, full_grad, global_grad, objective

logger = logging.getLogger(__name__)

# one row-index array per client; None means the client's whole dataset
ProbeBatch = Tuple[Optional[np.ndarray], ...]


def draw_probe_batch(task: FederatedTask, size: Optional[int], seed: int) -> ProbeBatch:
    """Fixed probe rows per client, drawn once per experiment without replacement."""
    if size is None:
        return tuple(None for _ in range(task.K))
    batches = []
    for k, client in enumerate(task.clients):
        if size >= client.n:
            batches.append(None)
            continue
        rng = RandomStream(seed, client=k, purpose=Purpose.PROBE).generator()
        batches.append(np.sort(rng.choice(client.n, size=size, replace=False)))
    return tuple(batches)


def _probe_grad(task: FederatedTask, k: int, w: np.ndarray, rows: Optional[np.ndarray]) -> np.ndarray:
    return full_grad(task, k, w) if rows is None else batch_grad(task, k, w, rows)


def gradient_mismatch(
    task: FederatedTask,
    w_r: np.ndarray,
    states: Sequence[ClientState],
    alpha: float,
    probe_batch: ProbeBatch,
) -> float:
    """(1/K) Σ_k ‖∇L_S(w_r) − ∇L_S(w_r − α e_k)‖² on the fixed probe rows S."""
    if len(probe_batch) != task.K:
        raise DomainError(f"probe batch covers {len(probe_batch)} clients, task has {task.K}")
    total = 0.0
    for k, state in enumerate(states):
        rows = probe_batch[k]
        shifted = w_r - alpha * state.residual
        total += norm2_sq(_probe_grad(task, k, w_r, rows) - _probe_grad(task, k, shifted, rows))
    return total / task.K


def residual_energy_mean(states: Sequence[ClientState]) -> float:
    return sum(norm2_sq(s.residual) for s in states) / len(states)


def virtual_identity_residual(trace: RoundTrace, eta: float, alpha_r: float, p: float) -> float:
    """Relative defect of the virtual-iterate recursion for one round.

    With x_r = w_r − η ẽ_r (ẽ the all-client mean residual):
      full participation  x_{r+1} = x_r + η α ē_r − η ḡ_r
      partial             x_{r+1} = x_r + η [p(α ē_r − ḡ_r) − (1−p) C̄_{r+1}]
    where ē, ḡ, C̄ are participant means.
    """
    x_r = trace.w_r - eta * trace.e_tilde
    lhs = trace.w_next - eta * trace.e_tilde_next
    if p >= 1.0:
        rhs = x_r + eta * alpha_r * trace.e_bar - eta * trace.g_bar
    else:
        rhs = x_r + eta * (p * (alpha_r * trace.e_bar - trace.g_bar) - (1.0 - p) * trace.c_bar)
    return float(np.linalg.norm(lhs - rhs) / max(1.0, np.linalg.norm(lhs)))


def round_bits(spec: CompressorSpec, d: int, m: int, downlink_clients: int = 0) -> int:
    """Uplink of m clients, plus an optional dense broadcast to `downlink_clients`."""
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    return m * uplink_bits(spec, d) + downlink_clients * d * spec.value_bits


def accumulate_comm(
    record: MetricsRecord, spec: CompressorSpec, d: int, m: int, downlink_clients: int = 0
) -> MetricsRecord:
    total = record.uplink_bits_cum + round_bits(spec, d, m, downlink_clients)
    if total >= UPLINK_BITS_LIMIT:
        raise AccountingError(f"cumulative bit counter overflows 2^63 at round {record.round}")
    return record.model_copy(update={"uplink_bits_cum": total})


def snapshot(
    task: FederatedTask,
    r: int,
    w: np.ndarray,
    states: Sequence[ClientState],
    mismatch: float = 0.0,
    uplink_bits_cum: int = 0,
) -> MetricsRecord:
    """Metrics of w_r and the residuals held at the start of round r."""
    return MetricsRecord(
        round=r,
        f_w=objective(task, w),
        grad_norm_sq=norm2_sq(global_grad(task, w)),
        residual_energy_mean=residual_energy_mean(states),
        mismatch=mismatch,
        uplink_bits_cum=uplink_bits_cum,
    )
