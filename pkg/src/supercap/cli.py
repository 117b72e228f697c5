"""Command-line front end.

Usage::

    supercap charge|converge|eis|timing [--config FILE] [--out DIR]
             [--variant linear|log|quadratic] [--scheme sem|fdm] [--order N]

The configuration is a JSON object; every key is optional and unknown keys
are rejected.  Each run writes its CSV artifact(s) and ``manifest.json``
into the output directory.  Exit codes: 0 success, 2 configuration error,
3 solver failure, 4 I/O error, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from . import experiments as ex
from .cellmodel import (
    CellParameters,
    ConcentrationError,
    ModelVariant,
    ParameterError,
    RegionParameters,
    SingularSystemError,
)
from .integrator import (
    ConstantCurrent,
    ConstantVoltage,
    NewtonFailure,
    Protocol,
    Sinusoid,
    StepFailure,
    StepperConfig,
)
from .spectral import Scheme

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4
SUBCOMMANDS = ("charge", "converge", "eis", "timing")
PROFILES = ("standard", "extended", "custom")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    profile: str = "standard"
    v0: float | None = None  # None: the profile's own starting voltage
    segments: tuple = ()  # only for profile == "custom"

    def build(self) -> tuple[Protocol, float]:
        if self.profile == "standard":
            return ex.standard_protocol(), ex.STANDARD_V0 if self.v0 is None else self.v0
        if self.profile == "extended":
            protocol = ex.standard_protocol(ex.STANDARD_CURRENT, ex.EXTENDED_CC, ex.EXTENDED_CV, offset=ex.EXTENDED_DROP)
            return protocol, ex.EXTENDED_V0 if self.v0 is None else self.v0
        return Protocol(tuple(_segment(s) for s in self.segments)), 0.0 if self.v0 is None else self.v0


@dataclass(frozen=True)
class ConvergenceConfig:
    orders: tuple[int, ...] = (4, 6, 8, 10, 12)
    reference_order: int = 30
    n_times: int = 147


@dataclass(frozen=True)
class EISConfig:
    frequencies: tuple[float, ...] = tuple(float(f) for f in ex.default_frequencies())
    dc: float = 2.0
    amplitude: float = 0.1
    v0: float = 0.0
    extract_cycles: int = 4
    samples_per_cycle: int = 32


@dataclass(frozen=True)
class TimingConfig:
    order_sem: int = 6
    order_fdm: int = 12
    repeats: int = 5


@dataclass(frozen=True)
class RunConfig:
    parameters: CellParameters = field(default_factory=CellParameters)
    variant: ModelVariant = ModelVariant.LINEAR
    scheme: Scheme = Scheme.CHEBYSHEV
    order: int = 5
    order_separator: int | None = None
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    stepper: StepperConfig = field(default_factory=StepperConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    eis: EISConfig = field(default_factory=EISConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    output: str = "output"
    workers: int = 1

    def to_dict(self) -> dict:
        """JSON-ready echo that :func:`config_from_dict` maps back to ``self``."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, CellParameters):
                value = value.to_dict()
            elif isinstance(value, (ModelVariant, Scheme)):
                value = value.value
            elif dataclasses.is_dataclass(value):
                value = _plain(dataclasses.asdict(value))
            out[f.name] = value
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ------------------------------------------------------------------ parsing
def _check_keys(data: Any, allowed: Sequence[str], where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    return data


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _integer(value, where: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _flat(cls, data, where: str, kinds: dict[str, str]):
    """Build a flat dataclass from ``data`` with typed fields."""
    names = [f.name for f in dataclasses.fields(cls)]
    data = _check_keys(data, names, where)
    kwargs = {}
    for key, value in data.items():
        kind = kinds.get(key, "float")
        path = f"{where}.{key}"
        if kind == "int":
            kwargs[key] = _integer(value, path)
        elif kind == "floats":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))
        elif kind == "ints":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = tuple(_integer(v, f"{path}[{i}]", 2) for i, v in enumerate(value))
        elif kind == "float?":
            kwargs[key] = None if value is None else _number(value, path)
        else:
            kwargs[key] = _number(value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _region(data, base: RegionParameters, where: str) -> RegionParameters:
    names = [f.name for f in dataclasses.fields(RegionParameters)]
    data = _check_keys(data, names, where)
    values = {k: (None if v is None and k == "sigma" else _number(v, f"{where}.{k}")) for k, v in data.items()}
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parameters(data) -> CellParameters:
    base = CellParameters()
    names = [f.name for f in dataclasses.fields(CellParameters)]
    data = _check_keys(data, names, "parameters")
    values = {}
    for key, value in data.items():
        if key in ("electrode", "separator"):
            values[key] = _region(value, getattr(base, key), f"parameters.{key}")
        else:
            values[key] = _number(value, f"parameters.{key}")
    try:
        return base.with_changes(**values)
    except (ParameterError, ValueError) as exc:
        raise ConfigError(f"parameters: {exc}") from None


_SEGMENT_TYPES = {
    "cc": (ConstantCurrent, {"current": "float", "duration": "float"}),
    "cv": (ConstantVoltage, {"voltage": "float?", "duration": "float", "offset": "float"}),
    "sine": (Sinusoid, {"dc": "float", "amplitude": "float", "frequency": "float", "cycles": "float"}),
}


def _segment(data: dict):
    kind = data["type"]
    cls, _ = _SEGMENT_TYPES[kind]
    return cls(**{k: v for k, v in data.items() if k != "type"})


def _protocol(data) -> ProtocolConfig:
    data = _check_keys(data, ("profile", "v0", "segments"), "protocol")
    profile = data.get("profile", "standard")
    if profile not in PROFILES:
        raise ConfigError(f"protocol.profile: expected one of {PROFILES}, got {profile!r}")
    v0 = data.get("v0")
    v0 = None if v0 is None else _number(v0, "protocol.v0")
    segments = []
    raw = data.get("segments", [])
    if not isinstance(raw, list):
        raise ConfigError("protocol.segments: expected a list")
    if raw and profile != "custom":
        raise ConfigError("protocol.segments: only allowed with profile 'custom'")
    if profile == "custom" and not raw:
        raise ConfigError("protocol.segments: a custom profile needs at least one segment")
    for n, seg in enumerate(raw):
        where = f"protocol.segments[{n}]"
        if not isinstance(seg, dict) or seg.get("type") not in _SEGMENT_TYPES:
            raise ConfigError(f"{where}: 'type' must be one of {sorted(_SEGMENT_TYPES)}")
        cls, kinds = _SEGMENT_TYPES[seg["type"]]
        body = {k: v for k, v in seg.items() if k != "type"}
        _flat(cls, body, where, kinds)  # validates
        clean = {"type": seg["type"]}
        for k, v in body.items():
            clean[k] = None if v is None else float(v)
        segments.append(clean)
    return ProtocolConfig(profile, v0, tuple(segments))


def config_from_dict(data: Any) -> RunConfig:
    names = [f.name for f in dataclasses.fields(RunConfig)]
    data = _check_keys(data, names, "config")
    kw: dict[str, Any] = {}
    if "parameters" in data:
        kw["parameters"] = _parameters(data["parameters"])
    if "variant" in data:
        try:
            kw["variant"] = ModelVariant.parse(data["variant"])
        except ValueError as exc:
            raise ConfigError(f"variant: {exc}") from None
    if "scheme" in data:
        try:
            kw["scheme"] = Scheme.parse(data["scheme"])
        except ValueError as exc:
            raise ConfigError(f"scheme: {exc}") from None
    if "order" in data:
        kw["order"] = _integer(data["order"], "order", 2)
    if data.get("order_separator") is not None:
        kw["order_separator"] = _integer(data["order_separator"], "order_separator", 2)
    if "protocol" in data:
        kw["protocol"] = _protocol(data["protocol"])
    if "stepper" in data:
        kw["stepper"] = _flat(StepperConfig, data["stepper"], "stepper", {"max_newton_iters": "int"})
    if "convergence" in data:
        conv = _flat(
            ConvergenceConfig, data["convergence"], "convergence", {"orders": "ints", "reference_order": "int", "n_times": "int"}
        )
        if conv.orders and conv.reference_order <= max(conv.orders):
            raise ConfigError("convergence.reference_order: must exceed every entry of orders")
        if conv.n_times < 2:
            raise ConfigError("convergence.n_times: must be >= 2")
        kw["convergence"] = conv
    if "eis" in data:
        eis = _flat(
            EISConfig, data["eis"], "eis", {"frequencies": "floats", "extract_cycles": "int", "samples_per_cycle": "int"}
        )
        f = np.asarray(eis.frequencies)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ConfigError("eis.frequencies: must be positive and strictly increasing")
        if eis.amplitude <= 0:
            raise ConfigError("eis.amplitude: must be positive")
        if eis.extract_cycles < 1 or eis.samples_per_cycle < 4:
            raise ConfigError("eis: need extract_cycles >= 1 and samples_per_cycle >= 4")
        kw["eis"] = eis
    if "timing" in data:
        timing = _flat(TimingConfig, data["timing"], "timing", {"order_sem": "int", "order_fdm": "int", "repeats": "int"})
        if min(timing.order_sem, timing.order_fdm) < 2 or timing.repeats < 1:
            raise ConfigError("timing: orders must be >= 2 and repeats >= 1")
        kw["timing"] = timing
    if "output" in data:
        if not isinstance(data["output"], str) or not data["output"]:
            raise ConfigError("output: expected a non-empty path string")
        kw["output"] = data["output"]
    if "workers" in data:
        kw["workers"] = _integer(data["workers"], "workers", 1)
    return RunConfig(**kw)


def parse_config(path: str | Path | None) -> RunConfig:
    """Read and validate a JSON configuration file.

    An empty file (or ``path=None``) gives the default configuration.

    Raises
    ------
    ConfigError
        on malformed JSON (with line and column) or invalid content.
    OSError
        if the file cannot be read.
    """
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    if not text.strip():
        return RunConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data)


# ----------------------------------------------------------------- dispatch
def _versions() -> dict:
    return {
        "supercap": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _run(config: RunConfig, subcommand: str, out: Path) -> tuple[list[str], dict]:
    params = config.parameters
    if subcommand == "charge":
        protocol, v0 = config.protocol.build()
        model = ex.build_model(config.variant, config.scheme, config.order, params, config.order_separator)
        trace = ex.run_profile(model, protocol, v0, config.stepper)
        ex.write_trace_csv(out / "trace.csv", trace)
        return ["trace.csv"], {"integrator": trace.diagnostics}
    if subcommand == "converge":
        conv = config.convergence
        times = np.linspace(0.0, ex.STANDARD_CC + ex.STANDARD_CV, conv.n_times)
        report = ex.convergence_study(
            config.variant, conv.orders, conv.reference_order, params=params, output_times=times, workers=config.workers
        )
        ex.write_convergence_csv(out / "convergence.csv", report)
        return ["convergence.csv"], {"reference": report.reference, "n_times": report.n_times}
    if subcommand == "eis":
        e = config.eis
        diags: list = []
        points = ex.run_eis(
            config.variant,
            e.frequencies,
            e.dc,
            e.amplitude,
            scheme=config.scheme,
            order=config.order,
            params=params,
            config=config.stepper,
            v0=e.v0,
            extract_cycles=e.extract_cycles,
            samples_per_cycle=e.samples_per_cycle,
            workers=config.workers,
            diagnostics=diags,
        )
        ex.write_eis_csv(out / "eis.csv", points)
        return ["eis.csv"], {
            "knee_frequency_Hz": ex.knee_frequency(points),
            "flagged_frequencies_Hz": [p.frequency for p in points if p.flagged],
            "phasor_drift": [p.drift for p in points],
            "integrator": diags,
        }
    if subcommand == "timing":
        t = config.timing
        res = ex.timing_study(t.order_sem, t.order_fdm, variant=config.variant, params=params, config=config.stepper, repeats=t.repeats)
        return [], {"timing": res._asdict()}
    raise ConfigError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")


def dispatch(config: RunConfig, subcommand: str, out: str | Path | None = None) -> int:
    """Run one subcommand and write its artifacts; returns the exit status."""
    out = Path(out if out is not None else config.output)
    started = time.perf_counter()
    try:
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
        out.mkdir(parents=True, exist_ok=True)
        files, diagnostics = _run(config, subcommand, out)
        manifest = {
            "subcommand": subcommand,
            "config": config.to_dict(),
            "versions": _versions(),
            "wall_time_s": time.perf_counter() - started,
            "outputs": files,
            "diagnostics": diagnostics,
        }
        (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2) + "\n")
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailure, NewtonFailure, ConcentrationError, SingularSystemError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # report rather than dump a traceback
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supercap", description="Supercapacitor cell simulations.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--variant", choices=[v.value for v in ModelVariant])
    parser.add_argument("--scheme", choices=[s.value for s in Scheme])
    parser.add_argument("--order", type=int, help="collocation order per subdomain")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        config = parse_config(args.config)
        changes = {}
        if args.variant:
            changes["variant"] = ModelVariant.parse(args.variant)
        if args.scheme:
            changes["scheme"] = Scheme.parse(args.scheme)
        if args.order is not None:
            if args.order < 2:
                raise ConfigError(f"--order must be >= 2, got {args.order}")
            changes["order"] = args.order
        if args.out:
            changes["output"] = args.out
        config = dataclasses.replace(config, **changes)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return dispatch(config, args.subcommand)


if __name__ == "__main__":
    sys.exit(main())
