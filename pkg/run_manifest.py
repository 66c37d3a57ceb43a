import csv
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from control_model import (
    ControlChannel,
    ControlProportional,
    FixedOperator,
    NoiseChannel,
    NoiseKind,
    PulseGrid,
    RobustnessTerm,
    SystemModel,
)
from grape_optimizer import OptimizerConfig
from noise_analysis import PSDModel, StaticMode, SweepAxis, default_omega_grid
from robust_objective import FitnessConfig
from system_presets import PRESETS, PresetSystem, load_preset, original_pulse

__version__ = "1.0.0"
TOOL_NAME = "vanloan-grape"
UNITS_NOTE = "angular frequencies in rad/s (X Hz input means 2*pi*X rad/s), times in s, ratios dimensionless"

# unit -> (factor to SI, dimension)
_UNITS = {
    "hz": (2 * math.pi, "frequency"),
    "khz": (2 * math.pi * 1e3, "frequency"),
    "mhz": (2 * math.pi * 1e6, "frequency"),
    "ghz": (2 * math.pi * 1e9, "frequency"),
    "rad/s": (1.0, "frequency"),
    "1/s": (1.0, "frequency"),
    "s": (1.0, "time"),
    "ms": (1e-3, "time"),
    "us": (1e-6, "time"),
    "μs": (1e-6, "time"),
    "ns": (1e-9, "time"),
    "%": (1e-2, "ratio"),
}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")

_TOP_KEYS = {"version", "system", "pulse", "noises", "fitness", "optimizer", "analysis"}
_SYSTEM_KEYS = {"preset", "params", "inline"}
_INLINE_KEYS = {"drift", "controls", "isometry", "target", "local_z", "noises"}
_INLINE_CONTROL_KEYS = {"generator", "carrier", "name"}
_INLINE_NOISE_KEYS = {"name", "kind", "operator", "autocorrelation"}
_PULSE_KEYS = {"T", "M", "omega_max", "smoothing_sigma", "init_scale", "seed", "file"}
_NOISE_KEYS = {"strength"}
_FITNESS_KEYS = {"terms", "phi0_threshold", "gradient_mode"}
_TERM_KEYS = {"order", "noises", "weight"}
_OPTIMIZER_KEYS = {"max_inner_iters", "lbfgs_memory", "armijo_c", "backtrack_shrink", "max_backtracks",
                   "initial_step", "grad_tolerance", "value_tolerance", "adjacency_bound",
                   "phi0_threshold", "lambda_decay", "max_outer_rounds", "retighten"}
_ANALYSIS_KEYS = {"mc_realizations", "static_mode", "omega_grid", "sweep", "filter_noise"}
_OMEGA_KEYS = {"min", "max", "points"}
_AXIS_KEYS = {"noise", "start", "stop", "count"}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the dotted field path"""


def parse_quantity(value: Any, path: str = "value", expect: Optional[str] = None,
                   conversions: Optional[List[Dict]] = None) -> float:
    """
    Convert a number or a unit string to SI.

    Args:
        value: Bare number (SI) or string such as "25 MHz", "22 ns", "0.5%"
        path: Dotted field path used in error messages and the conversion log
        expect: Required dimension ("frequency", "time" or "ratio") of unit strings
        conversions: Log that receives {"field", "input", "value"} for unit strings

    Returns:
        Value in rad/s, s or as a ratio
    """
    if isinstance(value, bool):
        raise ConfigError(f"Field '{path}' must be a number, got {value!r}")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ConfigError(f"Field '{path}' must be finite, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"Field '{path}' must be a number or unit string, got {value!r}")
    match = _QUANTITY.match(value)
    if not match:
        raise ConfigError(f"Field '{path}' is not a quantity: {value!r}")
    number, unit = float(match.group(1)), match.group(2)
    if not unit:
        return number
    key = unit if unit in ("μs",) else unit.lower()
    if key not in _UNITS:
        raise ConfigError(f"Field '{path}' has unknown unit '{unit}'")
    factor, dimension = _UNITS[key]
    if expect is not None and dimension != expect:
        raise ConfigError(f"Field '{path}' expects a {expect}, got {dimension} '{value}'")
    result = number * factor
    if conversions is not None:
        conversions.append({"field": path, "input": value, "value": result})
    return result


def _check_keys(section: Any, allowed: set, path: str) -> Dict:
    if not isinstance(section, dict):
        raise ConfigError(f"Field '{path}' must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"Unknown key '{key}' in '{path}'")
    return section


def _require(section: Dict, key: str, path: str) -> Any:
    if key not in section:
        raise ConfigError(f"Missing required field '{path}.{key}'")
    return section[key]


def _int(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"Field '{path}' must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"Field '{path}' must be >= {minimum}, got {value}")
    return int(value)


def parse_matrix(value: Any, path: str) -> np.ndarray:
    """Nested list of numbers or [re, im] pairs"""
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"Field '{path}' is not a numeric matrix")
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == 2:
        return arr.astype(complex)
    raise ConfigError(f"Field '{path}' must be a 2-d matrix, got shape {arr.shape}")


def _inline_system(section: Dict, conversions: List[Dict]) -> PresetSystem:
    path = "system.inline"
    _check_keys(section, _INLINE_KEYS, path)
    drift = parse_matrix(_require(section, "drift", path), f"{path}.drift")
    controls = []
    for i, ch in enumerate(_require(section, "controls", path)):
        cpath = f"{path}.controls[{i}]"
        _check_keys(ch, _INLINE_CONTROL_KEYS, cpath)
        carrier = ch.get("carrier")
        if carrier is not None:
            carrier = parse_quantity(carrier, f"{cpath}.carrier", "frequency", conversions)
        controls.append(ControlChannel(parse_matrix(_require(ch, "generator", cpath), f"{cpath}.generator"),
                                       carrier=carrier, name=ch.get("name", f"c{i}")))
    isometry = section.get("isometry")
    S = np.eye(drift.shape[0], dtype=complex) if isometry is None else parse_matrix(isometry, f"{path}.isometry")
    model = SystemModel(drift=drift, channels=tuple(controls), subspace_isometry=S,
                        target=parse_matrix(_require(section, "target", path), f"{path}.target"),
                        local_z=bool(section.get("local_z", False)), name="inline")
    noises = {}
    for i, spec in enumerate(section.get("noises", [])):
        npath = f"{path}.noises[{i}]"
        _check_keys(spec, _INLINE_NOISE_KEYS, npath)
        name = _require(spec, "name", npath)
        op = _require(spec, "operator", npath)
        operator = ControlProportional() if op == "control" else FixedOperator(parse_matrix(op, f"{npath}.operator"))
        terms = tuple((complex(ar, ai), complex(br, bi)) for ar, ai, br, bi in spec.get("autocorrelation", []))
        noises[name] = NoiseChannel(name, NoiseKind.from_name(spec.get("kind", "static")), operator,
                                    autocorrelation=terms)
    psds = {name: PSDModel.exp_sum(n.autocorrelation, 0.0) for name, n in noises.items() if not n.is_static}
    return PresetSystem("inline", model, noises, None, psds, {})


@dataclass
class RunConfig:
    """Validated run configuration with everything resolved to SI units"""
    data: Dict
    system: PresetSystem
    strengths: Dict[str, float]
    fitness: FitnessConfig
    optimizer: OptimizerConfig
    pulse_file: Optional[str] = None
    seed: int = 0
    mc_realizations: int = 100
    static_mode: StaticMode = StaticMode.FIXED
    omega_grid: Optional[np.ndarray] = None
    sweep_axes: List[SweepAxis] = field(default_factory=list)
    filter_noise: Optional[str] = None
    conversions: List[Dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Dict, base_dir: str = ".") -> 'RunConfig':
        conv: List[Dict] = []
        _check_keys(data, _TOP_KEYS, "config")

        system_section = _check_keys(_require(data, "system", "config"), _SYSTEM_KEYS, "system")
        if "inline" in system_section:
            system = _inline_system(system_section["inline"], conv)
        else:
            preset = _require(system_section, "preset", "system")
            params = _check_keys(system_section.get("params", {}), set(_param_fields(preset)), "system.params")
            resolved = {}
            for key, value in params.items():
                resolved[key] = value if isinstance(value, (list, bool)) or value is None else \
                    parse_quantity(value, f"system.params.{key}", None, conv)
                if key in ("M", "levels", "samples_per_period"):
                    resolved[key] = _int(resolved[key], f"system.params.{key}", 1)
            try:
                system = load_preset(preset, resolved)
            except ValueError as e:
                raise ConfigError(f"Invalid 'system': {e}")

        pulse = _check_keys(_require(data, "pulse", "config"), _PULSE_KEYS, "pulse")
        pulse_file = pulse.get("file")
        if pulse_file is not None and pulse_file != "original":
            pulse_file = os.path.join(base_dir, pulse_file)
        T = parse_quantity(_require(pulse, "T", "pulse"), "pulse.T", "time", conv)
        M = _int(_require(pulse, "M", "pulse"), "pulse.M", 1)
        if not T > 0:
            raise ConfigError(f"Field 'pulse.T' must be positive, got {T}")
        omega_max = pulse.get("omega_max")
        omega_max = None if omega_max is None else parse_quantity(omega_max, "pulse.omega_max", "frequency", conv)
        init_scale = pulse.get("init_scale")
        init_scale = None if init_scale is None else parse_quantity(init_scale, "pulse.init_scale", "frequency", conv)
        seed = _int(pulse.get("seed", 0), "pulse.seed", 0)

        strengths = {}
        for name, spec in _check_keys(data.get("noises", {}), set(system.noises), "noises").items():
            _check_keys(spec, _NOISE_KEYS, f"noises.{name}")
            expect = "ratio" if system.noises[name].control_proportional else "frequency"
            strengths[name] = parse_quantity(spec.get("strength", 0.0), f"noises.{name}.strength", expect, conv)
            if strengths[name] < 0:
                raise ConfigError(f"Field 'noises.{name}.strength' must be >= 0")

        fit = _check_keys(data.get("fitness", {}), _FITNESS_KEYS, "fitness")
        terms = []
        for i, term in enumerate(fit.get("terms", [])):
            tpath = f"fitness.terms[{i}]"
            _check_keys(term, _TERM_KEYS, tpath)
            names = _require(term, "noises", tpath)
            unknown = [n for n in names if n not in system.noises]
            if unknown:
                raise ConfigError(f"Unknown noise '{unknown[0]}' in '{tpath}.noises'")
            weight = parse_quantity(term.get("weight", 0.0), f"{tpath}.weight")
            try:
                terms.append(RobustnessTerm(_int(_require(term, "order", tpath), f"{tpath}.order"),
                                            tuple(system.noises[n] for n in names), weight))
            except ValueError as e:
                raise ConfigError(f"Invalid '{tpath}': {e}")
        try:
            fitness = FitnessConfig(robustness_terms=tuple(terms),
                                    phi0_threshold=float(fit.get("phi0_threshold", 0.999)),
                                    gradient_mode=fit.get("gradient_mode", "exact"))
        except ValueError as e:
            raise ConfigError(f"Invalid 'fitness': {e}")

        opt = dict(_check_keys(data.get("optimizer", {}), _OPTIMIZER_KEYS, "optimizer"))
        if opt.get("adjacency_bound") is not None:
            opt["adjacency_bound"] = parse_quantity(opt["adjacency_bound"], "optimizer.adjacency_bound",
                                                    "frequency", conv)
        try:
            optimizer = OptimizerConfig(T=T, M=M, omega_max=omega_max, init_scale=init_scale,
                                        smoothing_sigma=float(pulse.get("smoothing_sigma", 0.0)),
                                        rng_seed=seed, **opt)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid 'optimizer': {e}")

        analysis = _check_keys(data.get("analysis", {}), _ANALYSIS_KEYS, "analysis")
        realizations = _int(analysis.get("mc_realizations", 100), "analysis.mc_realizations", 1)
        try:
            static_mode = StaticMode(analysis.get("static_mode", "fixed"))
        except ValueError:
            raise ConfigError("Field 'analysis.static_mode' must be 'fixed' or 'gaussian'")
        filter_noise = analysis.get("filter_noise")
        if filter_noise is not None and filter_noise not in system.noises:
            raise ConfigError(f"Unknown noise '{filter_noise}' in 'analysis.filter_noise'")
        grid = None
        if "omega_grid" in analysis:
            og = _check_keys(analysis["omega_grid"], _OMEGA_KEYS, "analysis.omega_grid")
            grid = default_omega_grid(
                None, _int(og.get("points", 400), "analysis.omega_grid.points", 2),
                parse_quantity(_require(og, "min", "analysis.omega_grid"), "analysis.omega_grid.min", "frequency", conv),
                parse_quantity(_require(og, "max", "analysis.omega_grid"), "analysis.omega_grid.max", "frequency", conv))
        axes = []
        for i, spec in enumerate(analysis.get("sweep", [])):
            apath = f"analysis.sweep[{i}]"
            _check_keys(spec, _AXIS_KEYS, apath)
            axes.append(build_axis(system, _require(spec, "noise", apath), _require(spec, "start", apath),
                                   _require(spec, "stop", apath), _require(spec, "count", apath), apath, conv))

        return cls(data=data, system=system, strengths=strengths, fitness=fitness, optimizer=optimizer,
                   pulse_file=pulse_file, seed=seed, mc_realizations=realizations, static_mode=static_mode,
                   omega_grid=grid, sweep_axes=axes, filter_noise=filter_noise, conversions=conv)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config {path} is not valid JSON: {e}")
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def noises(self) -> Dict[str, NoiseChannel]:
        """Preset noise channels carrying the configured strengths"""
        return self.system.with_strengths(self.strengths)

    def config_hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def metadata(self, seed: Optional[int] = None, **extra) -> Dict:
        meta = {
            "tool": TOOL_NAME,
            "version": __version__,
            "config_hash": self.config_hash(),
            "seed": self.seed if seed is None else seed,
            "system": self.system.name,
            "units": UNITS_NOTE,
            "unit_conversions": list(self.conversions),
        }
        meta.update(extra)
        return meta

    def load_pulse(self, override: Optional[str] = None) -> PulseGrid:
        """Pulse file from the command line, else the config's `pulse.file`"""
        source = override if override is not None else self.pulse_file
        if source is None:
            raise ConfigError("No pulse given: pass a pulse file or set 'pulse.file'")
        if source == "original":
            if self.system.params is None:
                raise ConfigError("Inline systems have no original pulse")
            return original_pulse(self.system)
        pulse = load_pulse(source)
        if pulse.n_channels != self.system.model.n_channels:
            raise ConfigError(f"Pulse has {pulse.n_channels} channels, system "
                              f"{self.system.name} has {self.system.model.n_channels}")
        return pulse


def _param_fields(preset: str) -> List[str]:
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}' in 'system.preset'; available: {', '.join(PRESETS)}")
    return [f.name for f in fields(PRESETS[preset]["params"])]


def build_axis(system: PresetSystem, name: str, start: Any, stop: Any, count: Any,
               path: str = "axis", conversions: Optional[List[Dict]] = None) -> SweepAxis:
    if name not in system.noises:
        raise ConfigError(f"Unknown noise '{name}' in '{path}'")
    noise = system.noises[name]
    if not noise.is_static:
        raise ConfigError(f"Sweep axis '{path}' needs a static noise, '{name}' is time-dependent")
    expect = "ratio" if noise.control_proportional else "frequency"
    lo = parse_quantity(start, f"{path}.start", expect, conversions)
    hi = parse_quantity(stop, f"{path}.stop", expect, conversions)
    return SweepAxis.linspace(noise, lo, hi, _int(count, f"{path}.count", 1))


def parse_axis(system: PresetSystem, spec: str, conversions: Optional[List[Dict]] = None) -> SweepAxis:
    """Axis from 'name:start:stop:count', e.g. 'rabi:-3%:3%:13'"""
    parts = spec.split(":")
    if len(parts) != 4:
        raise ConfigError(f"Axis '{spec}' must look like name:start:stop:count")
    name, start, stop, count = parts
    try:
        count = int(count)
    except ValueError:
        raise ConfigError(f"Axis '{spec}' has a non-integer count")
    return build_axis(system, name, start, stop, count, f"--axis {name}", conversions)


def _write_json(path: str, payload: Dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def save_pulse(path: str, pulse: PulseGrid, metadata: Dict) -> None:
    _write_json(path, {"metadata": metadata, "pulse": pulse.to_dict()})


def load_pulse(path: str) -> PulseGrid:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    data = payload.get("pulse", payload)
    try:
        return PulseGrid.from_dict(data)
    except KeyError as e:
        raise ConfigError(f"Pulse file {path} is missing field {e}")


def save_report(path: str, report: Dict, metadata: Dict) -> None:
    _write_json(path, {"metadata": metadata, "report": report})


def save_trace(path: str, trace: Dict, metadata: Dict) -> None:
    _write_json(path, {"metadata": metadata, "trace": trace})


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]],
              metadata: Optional[Dict] = None) -> None:
    """CSV with '# key: value' metadata lines, 17 significant digits and '\\n' endings"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in sorted((metadata or {}).items()):
            f.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def read_csv(path: str) -> Tuple[List[str], np.ndarray]:
    """Header and numeric rows of a file written by write_csv"""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], np.array([[float(v) for v in row] for row in rows[1:]])
