"""In-memory state of a simulation: tasks, client memory, messages, traces."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.constants import TaskKind


@dataclass(frozen=True)
class CompressedUpdate:
    dense: np.ndarray
    support_size: int
    uplink_bits: int


@dataclass(frozen=True)
class ClientObjective:
    """f_k: quadratic ½‖A w − b‖² or mean logistic loss, plus (λ/2)‖w‖² outside."""
    kind: TaskKind
    features: np.ndarray  # A_k for quadratics, X_k for logistic
    targets: np.ndarray   # b_k for quadratics, labels in {0,1} for logistic
    class_labels: Optional[np.ndarray] = None  # original class ids (Dirichlet tasks)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class FederatedTask:
    clients: Tuple[ClientObjective, ...]
    dim: int
    weight_decay: float = 0.0
    classes: int = 0

    @property
    def K(self) -> int:
        return len(self.clients)

    @property
    def kind(self) -> TaskKind:
        return self.clients[0].kind


@dataclass
class ClientState:
    residual: np.ndarray
    momentum_buffer: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, dim: int) -> "ClientState":
        return cls(residual=np.zeros(dim))

    def copy(self) -> "ClientState":
        buf = None if self.momentum_buffer is None else self.momentum_buffer.copy()
        return ClientState(residual=self.residual.copy(), momentum_buffer=buf)


@dataclass(frozen=True)
class RoundSchedule:
    r: int
    eta: float
    eta_r: float
    alpha_r: float
    T: int
    participants: Tuple[int, ...]
    batch_size: int
    momentum: float = 0.0


@dataclass(frozen=True)
class ClientMessage:
    client: int
    compressed: CompressedUpdate
    raw_update_norm_sq: float
    residual_energy: float


@dataclass
class LocalTrace:
    """Iterates w_{r+½,t} for t = 0..T and the accumulated update g."""
    iterates: List[np.ndarray]
    update: np.ndarray


@dataclass
class RoundTrace:
    r: int
    w_r: np.ndarray
    w_next: np.ndarray
    e_tilde: np.ndarray        # all-K mean residual at the start of the round
    e_tilde_next: np.ndarray   # all-K mean residual after the round
    e_bar: np.ndarray          # participant mean residual at the start of the round
    g_bar: np.ndarray          # participant mean accumulated local update
    c_bar: np.ndarray          # participant mean compressed update
    participants: Tuple[int, ...]
    K: int
    residual_energies: Dict[int, float] = field(default_factory=dict)
    local_traces: Dict[int, LocalTrace] = field(default_factory=dict)

    @property
    def participation(self) -> float:
        return len(self.participants) / self.K


@dataclass
class FrozenState:
    """Snapshot at the start of round r used for Monte-Carlo bound checks."""
    r: int
    w: np.ndarray
    states: List[ClientState]
    schedule: RoundSchedule


@dataclass(frozen=True)
class DissimilarityEstimate:
    """(β², ν²) fitted so that mean client gradient energy ≤ β²‖∇f‖² + ν² on every probe."""
    beta_sq: float
    nu_sq: float
    probe_count: int
    max_violation: float
