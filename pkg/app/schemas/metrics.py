from pydantic import BaseModel, Field


class MetricsRecord(BaseModel):
    """One row of the per-round metrics file.

    Row r describes w_r and the residuals e_r at the start of round r, plus
    the uplink spent and the virtual-iterate defect of round r itself.
    """
    round: int = Field(ge=0)
    f_w: float
    grad_norm_sq: float = Field(ge=0)
    residual_energy_mean: float = Field(ge=0)
    mismatch: float = Field(default=0.0, ge=0)
    uplink_bits_cum: int = Field(default=0, ge=0)
    virtual_identity_residual: float = Field(default=0.0, ge=0)
    wall_time_ms: int = Field(default=0, ge=0)
