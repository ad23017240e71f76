import math
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.constants import (
    DEFAULT_ALPHA,
    DEFAULT_CLIENTS,
    DEFAULT_LOCAL_STEPS,
    DEFAULT_PARTICIPATION,
    DEFAULT_ROUNDS,
    DEFAULT_SERVER_LR,
    DEFAULT_VALUE_BITS,
    AlphaRule,
    CompressorFamily,
    LocalLrDecay,
    QuadraticPreset,
    RunStatus,
    TaskKind,
)


def participant_count(clients: int, participation: float) -> int:
    """m = floor(pK), guarded against products like 0.29 * 100 = 28.999..."""
    return int(math.floor(participation * clients + 1e-9))


class CompressorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    family: CompressorFamily = CompressorFamily.TOP_K
    # top_k only: either an absolute k or a ratio k/d
    k: Optional[int] = Field(default=None, ge=1)
    ratio: Optional[float] = Field(default=None, gt=0, le=1)
    value_bits: int = Field(default=DEFAULT_VALUE_BITS, ge=1)

    @model_validator(mode="after")
    def check_top_k_size(self):
        if self.family == CompressorFamily.TOP_K and self.k is None and self.ratio is None:
            raise ValueError("top_k needs either k or ratio")
        if self.k is not None and self.ratio is not None:
            raise ValueError("set only one of k and ratio")
        return self

    def k_for(self, dim: int) -> int:
        if self.k is not None:
            return self.k
        if self.ratio is not None:
            return max(1, int(round(self.ratio * dim)))
        return dim

    def delta(self, dim: int) -> float:
        """Certified contraction constant for vectors of length `dim`."""
        if self.family == CompressorFamily.TOP_K:
            return dim / self.k_for(dim)
        if self.family == CompressorFamily.SCALED_SIGN:
            return float(dim)
        return 1.0


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: TaskKind = TaskKind.QUADRATIC
    clients: int = Field(default=DEFAULT_CLIENTS, ge=1)
    dim: int = Field(default=100, ge=1)
    weight_decay: float = Field(default=0.0, ge=0)

    # quadratic
    preset: QuadraticPreset = QuadraticPreset.RANDOM
    samples_per_client: int = Field(default=50, ge=1)
    heterogeneity: float = Field(default=1.0, ge=0)
    label_noise: float = Field(default=0.1, ge=0)

    # logistic (Dirichlet-partitioned blobs)
    classes: int = Field(default=2, ge=2)
    per_class: int = Field(default=200, ge=1)
    dirichlet_gamma: float = Field(default=0.5, gt=0)
    separation: float = Field(default=3.0, gt=0)

    @model_validator(mode="after")
    def check_partition_feasible(self):
        if self.kind == TaskKind.LOGISTIC and self.per_class * self.classes < self.clients:
            raise ValueError(
                f"task.per_class: {self.per_class}*{self.classes} samples cannot cover {self.clients} clients"
            )
        return self


class AlphaSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rule: AlphaRule = AlphaRule.CONSTANT
    value: float = Field(default=DEFAULT_ALPHA, ge=0, le=1)
    start: float = Field(default=1.0, ge=0, le=1)
    end: float = Field(default=0.5, ge=0, le=1)


class ScheduleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    server_lr: float = Field(default=DEFAULT_SERVER_LR, gt=0)
    local_lr: float = Field(default=0.01, gt=0)
    local_lr_decay: LocalLrDecay = LocalLrDecay.CONSTANT
    local_lr_min: float = Field(default=0.0, ge=0)
    local_lr_step_size: int = Field(default=50, ge=1)
    local_lr_gamma: float = Field(default=0.1, gt=0, le=1)
    local_steps: int = Field(default=DEFAULT_LOCAL_STEPS, ge=1)
    batch_size: int = Field(default=8, ge=1)
    alpha: AlphaSpec = Field(default_factory=AlphaSpec)
    momentum: float = Field(default=0.0, ge=0, lt=1)

    @field_validator("alpha", mode="before")
    @classmethod
    def coerce_scalar_alpha(cls, v):
        """Accept `alpha: 0.85` as shorthand for a constant rule."""
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return {"rule": AlphaRule.CONSTANT.value, "value": float(v)}
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: TaskSpec
    compressor: CompressorSpec = Field(default_factory=lambda: CompressorSpec(ratio=0.01))
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    participation: float = Field(default=DEFAULT_PARTICIPATION, gt=0, le=1)
    rounds: int = Field(default=DEFAULT_ROUNDS, ge=0)
    seed: int = Field(default=0, ge=0)
    # w_0 = init_scale · N(0, I); zero starts from the origin
    init_scale: float = Field(default=0.0, ge=0)
    replicates: int = Field(default=1, ge=1)
    threshold: float = Field(default=1e-3, gt=0)
    output_dir: Path = Path("runs/default")
    probe_batch_size: Optional[int] = Field(default=None, ge=1)
    record_wall_time: bool = False
    count_downlink: bool = False

    @model_validator(mode="after")
    def check_combinations(self):
        if participant_count(self.task.clients, self.participation) < 1:
            raise ValueError(
                f"participation: floor({self.participation}*{self.task.clients}) = 0 participants"
            )
        if self.compressor.family == CompressorFamily.TOP_K:
            k = self.compressor.k_for(self.task.dim)
            if k > self.task.dim:
                raise ValueError(f"compressor.k: k={k} exceeds task.dim={self.task.dim}")
        return self

    @property
    def participants(self) -> int:
        return participant_count(self.task.clients, self.participation)

    def with_alpha(self, alpha: float) -> "ExperimentConfig":
        schedule = self.schedule.model_copy(update={"alpha": AlphaSpec(rule=AlphaRule.CONSTANT, value=alpha)})
        return self.model_copy(update={"schedule": schedule})

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})


class RunSummary(BaseModel):
    seed: int
    alpha: Optional[float] = None
    status: RunStatus = RunStatus.COMPLETED
    rounds_completed: int = 0
    final_f: Optional[float] = None
    final_grad_norm_sq: Optional[float] = None
    min_grad_norm_sq: Optional[float] = None
    rounds_to_threshold: Optional[int] = None
    threshold: float
    uplink_bits_cum: int = 0
    mean_mismatch: float = 0.0
    final_residual_energy: float = 0.0
    metrics_path: Optional[str] = None
    failure: Optional[str] = None


class PartitionStats(BaseModel):
    """Per-client label histograms of a Dirichlet-partitioned task."""
    clients: int
    classes: int
    histograms: List[List[int]]
    majority_share: List[float]
    total_variation: List[float]
    median_majority_share: float
    mean_total_variation: float


class SweepRequest(BaseModel):
    config: ExperimentConfig
    alphas: List[float] = []
