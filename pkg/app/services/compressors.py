"""δ-contractive compression operators and their uplink cost."""
import logging

import numpy as np

from app.constants import CompressorFamily
from app.core.errors import ConfigError
from app.models.models import CompressedUpdate
from app.schemas.experiment import CompressorSpec
from app.services.numerics import check_finite, check_same_dim

logger = logging.getLogger(__name__)


def ceil_log2(d: int) -> int:
    return (d - 1).bit_length()


def uplink_bits(spec: CompressorSpec, d: int) -> int:
    """Bits one participating client sends per round."""
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}", field="task.dim")
    if spec.family == CompressorFamily.TOP_K:
        # index + value per kept coordinate
        return spec.k_for(d) * (ceil_log2(d) + spec.value_bits)
    if spec.family == CompressorFamily.SCALED_SIGN:
        # one sign bit per coordinate plus the shared scale
        return d + spec.value_bits
    return d * spec.value_bits


def top_k(u: np.ndarray, k: int) -> np.ndarray:
    # stable sort on −|u| keeps the lowest index first among ties
    keep = np.argsort(-np.abs(u), kind="stable")[:k]
    out = np.zeros_like(u)
    out[keep] = u[keep]
    return out


def scaled_sign(u: np.ndarray) -> np.ndarray:
    scale = float(np.abs(u).sum()) / u.shape[0]
    if scale == 0.0:
        return np.zeros_like(u)
    # sign(0) is taken as +1 so every coordinate carries the scale
    return np.where(u >= 0, scale, -scale)


def compress(spec: CompressorSpec, u: np.ndarray) -> CompressedUpdate:
    check_finite(u, "update")
    d = u.shape[0]
    if spec.family == CompressorFamily.TOP_K:
        k = spec.k_for(d)
        if k > d:
            raise ConfigError(f"k={k} exceeds dimension {d}", field="compressor.k")
        dense = top_k(u, k)
    elif spec.family == CompressorFamily.SCALED_SIGN:
        dense = scaled_sign(u)
    else:
        dense = u.copy()
    return CompressedUpdate(
        dense=dense,
        support_size=int(np.count_nonzero(dense)),
        uplink_bits=uplink_bits(spec, d),
    )


def residual(u: np.ndarray, c: CompressedUpdate) -> np.ndarray:
    """e = u − C(u).

    e + C(u) recovers u bit-for-bit for top-k and identity, whose kept entries
    are copied from u; for scaled sign the round trip is exact only up to rounding.
    """
    check_same_dim(u, c.dense)
    return u - c.dense
