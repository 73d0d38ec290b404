"""Large-scale path loss and the propagation-model RSRP along a trajectory."""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import propagation_constants as K
from .mapio import NetworkParamsSeries, RSRPSeries

log = logging.getLogger(__name__)


class PropagationModel(str, enum.Enum):
    FSPM = "FSPM"
    HATA_URBAN = "HATA_URBAN"
    WINNER2_UMA = "WINNER2_UMA"


class RangeWarning(UserWarning):
    """Inputs outside a model's published validity range (result still computed)."""


@dataclass(frozen=True)
class PropagationConfig:
    G_t: float = 0.0
    G_r: float = 0.0
    u: float = 0.0
    model_override: Optional[PropagationModel] = None
    hata_city_size: str = "medium"

    def __post_init__(self):
        if self.hata_city_size not in ("medium", "large"):
            raise ValueError("hata_city_size must be 'medium' or 'large'")
        if self.model_override is not None:
            object.__setattr__(self, "model_override", PropagationModel(self.model_override))

    @classmethod
    def from_dict(cls, d: dict) -> "PropagationConfig":
        keys = {"G_t", "G_r", "u", "model_override", "hata_city_size"}
        return cls(**{k: v for k, v in d.items() if k in keys})


def select_model(f_c: float) -> PropagationModel:
    if not f_c > 0:
        raise ValueError("f_c must be positive")
    if K.HATA_BAND[0] <= f_c <= K.HATA_BAND[1]:
        return PropagationModel.HATA_URBAN
    if K.WINNER2_BAND[0] <= f_c <= K.WINNER2_BAND[1]:
        return PropagationModel.WINNER2_UMA
    warnings.warn(f"f_c = {f_c:.4g} Hz is outside the Hata and WINNER II bands; using free space",
                  RangeWarning, stacklevel=2)
    return PropagationModel.FSPM


def fspm(D, f_c):
    D = np.asarray(D, dtype=np.float64)
    return 20 * np.log10(D) + 20 * np.log10(f_c) + 20 * np.log10(4 * np.pi / K.SPEED_OF_LIGHT)


def hata_mobile_correction(f_mhz, h_r, city_size: str = "medium"):
    h_r = np.asarray(h_r, dtype=np.float64)
    if city_size == "medium":
        return (1.1 * np.log10(f_mhz) - 0.7) * h_r - (1.56 * np.log10(f_mhz) - 0.8)
    if f_mhz < 300:
        return 8.29 * np.log10(1.54 * h_r) ** 2 - 1.1
    return 3.2 * np.log10(11.75 * h_r) ** 2 - 4.97


def hata_urban(D, f_c, h_t, h_r, city_size: str = "medium"):
    f_mhz = f_c / 1e6
    d_km = np.asarray(D, dtype=np.float64) / 1000.0
    h_t = np.asarray(h_t, dtype=np.float64)
    a = hata_mobile_correction(f_mhz, h_r, city_size)
    return (K.HATA_A + K.HATA_B * np.log10(f_mhz) - K.HATA_HB * np.log10(h_t) - a
            + (K.HATA_C - K.HATA_D * np.log10(h_t)) * np.log10(d_km))


def winner2_c2_los(D, f_c, h_t, h_r):
    D = np.asarray(D, dtype=np.float64)
    f_ghz = f_c / 1e9
    hb = np.maximum(np.asarray(h_t, dtype=np.float64) - K.WINNER2_EFFECTIVE_HEIGHT_OFFSET, 0.1)
    hm = np.maximum(np.asarray(h_r, dtype=np.float64) - K.WINNER2_EFFECTIVE_HEIGHT_OFFSET, 0.1)
    d_bp = 4.0 * hb * hm * f_c / K.SPEED_OF_LIGHT
    fr = np.log10(f_ghz / K.WINNER2_REF_FREQ_GHZ)
    s1, c1, f1 = K.WINNER2_C2_LOS_NEAR
    s2, c2, kb, km, f2 = K.WINNER2_C2_LOS_FAR
    near = s1 * np.log10(D) + c1 + f1 * fr
    far = s2 * np.log10(D) + c2 - kb * np.log10(hb) - km * np.log10(hm) + f2 * fr
    return np.where(D <= d_bp, near, far)


def _check_ranges(model: PropagationModel, D, f_c, h_t, h_r) -> None:
    D = np.atleast_1d(D)
    issues = []
    if model is PropagationModel.HATA_URBAN:
        if np.any((np.atleast_1d(h_t) < K.HATA_VALID_HT[0]) | (np.atleast_1d(h_t) > K.HATA_VALID_HT[1])):
            issues.append("h_t")
        if np.any((np.atleast_1d(h_r) < K.HATA_VALID_HR[0]) | (np.atleast_1d(h_r) > K.HATA_VALID_HR[1])):
            issues.append("h_r")
        d_km = D / 1000.0
        if np.any((d_km < K.HATA_VALID_D_KM[0]) | (d_km > K.HATA_VALID_D_KM[1])):
            issues.append("D")
        if not K.HATA_BAND[0] <= f_c <= K.HATA_BAND[1]:
            issues.append("f_c")
    elif model is PropagationModel.WINNER2_UMA:
        if np.any((D < K.WINNER2_VALID_D[0]) | (D > K.WINNER2_VALID_D[1])):
            issues.append("D")
        if not K.WINNER2_BAND[0] <= f_c <= K.WINNER2_BAND[1]:
            issues.append("f_c")
    if issues:
        warnings.warn(f"{model.value}: {', '.join(issues)} outside published validity range",
                      RangeWarning, stacklevel=3)


def path_loss(model, D, f_c: float, h_t=None, h_r=None, config: Optional[PropagationConfig] = None):
    """Path loss in dB; arrays broadcast over D, h_t, h_r."""
    model = PropagationModel(model)
    config = config or PropagationConfig()
    D_arr = np.asarray(D, dtype=np.float64)
    if np.any(D_arr <= 0):
        raise ValueError("path_loss needs D > 0")
    if not f_c > 0:
        raise ValueError("path_loss needs f_c > 0")
    if model is PropagationModel.FSPM:
        out = fspm(D_arr, f_c)
    else:
        if h_t is None or h_r is None:
            raise ValueError(f"{model.value} needs antenna heights")
        if np.any(np.asarray(h_r) <= 0) or np.any(np.asarray(h_t) <= np.asarray(h_r)):
            warnings.warn(f"{model.value}: expected h_t > h_r > 0", RangeWarning, stacklevel=2)
        _check_ranges(model, D_arr, f_c, h_t, h_r)
        if model is PropagationModel.HATA_URBAN:
            out = hata_urban(D_arr, f_c, h_t, h_r, config.hata_city_size)
        else:
            out = winner2_c2_los(D_arr, f_c, h_t, h_r)
    return float(out) if np.ndim(out) == 0 else out


def received_power(P_t, path_loss_db, config: Optional[PropagationConfig] = None):
    config = config or PropagationConfig()
    return P_t + config.G_t + config.G_r - path_loss_db + config.u


def rsrp_calc(params: NetworkParamsSeries, config: Optional[PropagationConfig] = None) -> RSRPSeries:
    """Propagation-model received power at every trajectory step."""
    config = config or PropagationConfig()
    out = np.empty(params.T)
    f_c = params.f_c
    # group steps by carrier so model selection and range warnings happen once per band
    for fc in np.unique(f_c):
        idx = np.flatnonzero(f_c == fc)
        model = config.model_override or select_model(float(fc))
        pl = path_loss(model, params.D[idx], float(fc), params.h_t[idx], params.h_r[idx], config)
        out[idx] = received_power(params.P_t[idx], pl, config)
    return RSRPSeries(out)
