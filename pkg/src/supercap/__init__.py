"""Porous-electrode supercapacitor simulations with spectral and finite-difference grids."""

__version__ = "0.1.0"

from .cellmodel import CellModel, CellParameters, ModelVariant, build_mesh  # noqa: E402
from .integrator import (  # noqa: E402
    ConstantCurrent,
    ConstantVoltage,
    Protocol,
    Sinusoid,
    StepperConfig,
    integrate,
)
from .spectral import Scheme  # noqa: E402

__all__ = [
    "CellModel",
    "CellParameters",
    "ConstantCurrent",
    "ConstantVoltage",
    "ModelVariant",
    "Protocol",
    "Scheme",
    "Sinusoid",
    "StepperConfig",
    "build_mesh",
    "integrate",
]
