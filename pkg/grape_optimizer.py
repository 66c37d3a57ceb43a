import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np
import psutil
from tqdm import tqdm

from control_model import PulseGrid, SystemModel
from robust_objective import FitnessConfig, FitnessReport, total_fitness


class ConstraintAuditWarning(UserWarning):
    """Adjacent-segment amplitude differences exceed the configured bound"""


def get_memory_usage() -> float:
    """Resident memory of this process in MB"""
    return psutil.Process().memory_info().rss / 1024 / 1024


@dataclass
class OptimizerConfig:
    """Configuration for the Van Loan GRAPE loop"""
    T: float = 1e-6
    M: int = 20
    max_inner_iters: int = 200
    lbfgs_memory: int = 10
    armijo_c: float = 1e-4
    backtrack_shrink: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 0.1
    grad_tolerance: float = 1e-10
    value_tolerance: float = 1e-15
    omega_max: Optional[float] = None
    smoothing_sigma: float = 0.0
    adjacency_bound: Optional[float] = None
    phi0_threshold: Optional[float] = None
    lambda_decay: float = 0.5
    max_outer_rounds: int = 5
    retighten: bool = False
    rng_seed: int = 0
    init_scale: Optional[float] = None
    progress: bool = True

    def __post_init__(self):
        if self.omega_max is not None and not self.omega_max > 0:
            raise ValueError(f"omega_max must be positive, got {self.omega_max}")
        if not 0.0 < self.lambda_decay < 1.0:
            raise ValueError(f"lambda_decay must lie in (0, 1), got {self.lambda_decay}")
        if self.lbfgs_memory < 1:
            raise ValueError(f"lbfgs_memory must be >= 1, got {self.lbfgs_memory}")
        if self.max_outer_rounds < 1:
            raise ValueError(f"max_outer_rounds must be >= 1, got {self.max_outer_rounds}")
        if self.smoothing_sigma < 0:
            raise ValueError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if self.omega_max is None and self.init_scale is None:
            raise ValueError("either omega_max or init_scale must be set")

    @property
    def scale(self) -> float:
        """Unit of the normalized optimization variables"""
        return self.omega_max if self.omega_max is not None else self.initial_amplitude

    @property
    def initial_amplitude(self) -> float:
        return self.init_scale if self.init_scale is not None else 0.1 * self.omega_max

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'OptimizerConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class IterationRecord:
    round: int
    iteration: int
    phi0: float
    phi: float
    penalties: Dict[str, float]
    grad_norm: float
    step: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class OptimizationTrace:
    iterations: List[IterationRecord] = field(default_factory=list)
    rounds: List[Dict] = field(default_factory=list)
    audit: List[str] = field(default_factory=list)
    status: str = "running"
    final_pulse: Optional[PulseGrid] = None
    final_report: Optional[FitnessReport] = None

    def to_dict(self) -> Dict:
        return {
            "status": self.status,
            "rounds": self.rounds,
            "audit": list(self.audit),
            "final": None if self.final_report is None else self.final_report.to_dict(),
            "iterations": [rec.to_dict() for rec in self.iterations],
        }


class LbfgsHistory:
    """Bounded store of (s, y) pairs; y is the change of the minimized gradient"""

    def __init__(self, memory: int = 10, curvature_eps: float = 1e-12):
        self.pairs: Deque[Tuple[np.ndarray, np.ndarray]] = deque(maxlen=memory)
        self.curvature_eps = curvature_eps

    def __len__(self) -> int:
        return len(self.pairs)

    def add(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store the pair if its curvature s·y is positive enough"""
        sy = float(np.dot(s, y))
        if not sy > self.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((np.array(s, dtype=float), np.array(y, dtype=float)))
        return True

    def clear(self) -> None:
        self.pairs.clear()


def lbfgs_step(history: LbfgsHistory, gradient: np.ndarray, params: Optional[np.ndarray] = None,
               bounds: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """
    Two-loop recursion ascent direction H·g.

    Args:
        history: Curvature pairs, newest last
        gradient: Gradient of the maximized objective
        params: Current parameters, used with bounds to freeze active components
        bounds: (lower, upper) box shared by all components

    Returns:
        Search direction; the gradient itself when no usable pair exists
    """
    g = np.asarray(gradient, dtype=float)
    usable = [(s, y) for s, y in history.pairs if np.dot(s, y) > 0]
    q = g.copy()
    alphas = []
    for s, y in reversed(usable):
        rho = 1.0 / np.dot(y, s)
        alpha = rho * np.dot(s, q)
        q -= alpha * y
        alphas.append((rho, alpha))
    if usable:
        s, y = usable[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, alpha) in zip(usable, reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += s * (alpha - beta)
    if not np.all(np.isfinite(q)):
        q = g.copy()
    if params is not None and bounds is not None:
        lower, upper = bounds
        q[(params <= lower) & (q < 0)] = 0.0
        q[(params >= upper) & (q > 0)] = 0.0
    return q


def _projected_gradient(x: np.ndarray, g: np.ndarray, bounds: Optional[Tuple[float, float]]) -> np.ndarray:
    g = g.copy()
    if bounds is not None:
        g[(x <= bounds[0]) & (g < 0)] = 0.0
        g[(x >= bounds[1]) & (g > 0)] = 0.0
    return g


def armijo_search(fun: Callable, x: np.ndarray, value: float, g: np.ndarray, direction: np.ndarray,
                  step: float, cfg: OptimizerConfig, bounds: Optional[Tuple[float, float]]):
    """
    Backtracking line search with projection onto the box.

    Returns:
        (step, x_new, evaluation) on success, None when no step is accepted
    """
    for _ in range(cfg.max_backtracks):
        x_new = x + step * direction
        if bounds is not None:
            x_new = np.clip(x_new, bounds[0], bounds[1])
        slope = float(np.dot(g, x_new - x))
        if slope <= 0:
            step *= cfg.backtrack_shrink
            continue
        evaluation = fun(x_new, False)
        if evaluation[0] >= value + cfg.armijo_c * slope:
            return step, x_new, evaluation
        step *= cfg.backtrack_shrink
    return None


def maximize_lbfgs(fun: Callable, x0: np.ndarray, cfg: OptimizerConfig,
                   bounds: Optional[Tuple[float, float]] = None,
                   callback: Optional[Callable] = None, desc: str = "L-BFGS") -> Tuple[np.ndarray, str]:
    """
    Projected L-BFGS ascent.

    Args:
        fun: (x, need_gradient) -> (value, gradient or None, payload)
        x0: Starting point
        cfg: Iteration budget and line-search settings
        bounds: Optional box for every component
        callback: Called as callback(iteration, x, evaluation, grad_norm, step)

    Returns:
        (best x, stop reason)
    """
    x = np.array(x0, dtype=float)
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    evaluation = fun(x, True)
    value, g = evaluation[0], evaluation[1]
    history = LbfgsHistory(cfg.lbfgs_memory)
    steepest_step = None
    reason = "max_iterations"
    if callback:
        callback(0, x, evaluation, float(np.linalg.norm(_projected_gradient(x, g, bounds))), 0.0)

    with tqdm(total=cfg.max_inner_iters, desc=desc, disable=not cfg.progress, leave=False) as pbar:
        for iteration in range(1, cfg.max_inner_iters + 1):
            gp = _projected_gradient(x, g, bounds)
            if np.max(np.abs(gp), initial=0.0) <= cfg.grad_tolerance:
                reason = "gradient_tolerance"
                break
            direction = lbfgs_step(history, gp, x, bounds)
            if len(history) == 0 or np.dot(gp, direction) <= 0:
                history.clear()
                direction = gp
            if len(history):
                step = 1.0
            elif steepest_step is None:
                step = cfg.initial_step / np.max(np.abs(direction))
            else:
                step = 2.0 * steepest_step
            found = armijo_search(fun, x, value, gp, direction, step, cfg, bounds)
            if found is None and len(history):
                history.clear()
                direction = gp
                step = (cfg.initial_step / np.max(np.abs(gp))) if steepest_step is None else 2.0 * steepest_step
                found = armijo_search(fun, x, value, gp, direction, step, cfg, bounds)
            if found is None:
                reason = "line_search_failed"
                break
            step, x_new, _ = found
            new_eval = fun(x_new, True)
            if len(history) == 0:
                steepest_step = step
            # minimized objective is -value, so y is the change of -g
            history.add(x_new - x, -(new_eval[1] - g))
            gain = new_eval[0] - value
            x, evaluation = x_new, new_eval
            value, g = evaluation[0], evaluation[1]
            grad_norm = float(np.linalg.norm(_projected_gradient(x, g, bounds)))
            if callback:
                callback(iteration, x, evaluation, grad_norm, step)
            pbar.update(1)
            pbar.set_postfix({
                "Φ": f"{value:.10f}",
                "|g|": f"{grad_norm:.2e}",
                "Memory (MB)": f"{get_memory_usage():.1f}",
            })
            if gain <= cfg.value_tolerance * max(1.0, abs(value)):
                reason = "value_tolerance"
                break
    return x, reason


def audit_adjacency(pulse: PulseGrid, bound: Optional[float]) -> List[str]:
    """Messages for every |u[m+1] - u[m]| above bound"""
    if bound is None:
        return []
    messages = []
    diffs = np.abs(np.diff(pulse.amplitudes, axis=1))
    for c, m in zip(*np.nonzero(diffs > bound)):
        messages.append(f"channel {c}: |u[{m + 1}] - u[{m}]| = {diffs[c, m]:.6g} exceeds {bound:.6g}")
    return messages


def enforce_constraints(pulse: PulseGrid, opt_cfg: OptimizerConfig) -> PulseGrid:
    """
    Clip amplitudes to ±omega_max and audit adjacent differences.

    A clipped pulse is returned unsmoothed with the clipped amplitudes as its raw parameters.
    """
    result = pulse
    if opt_cfg.omega_max is not None and np.any(np.abs(pulse.amplitudes) > opt_cfg.omega_max):
        clipped = np.clip(pulse.amplitudes, -opt_cfg.omega_max, opt_cfg.omega_max)
        result = PulseGrid(T=pulse.T, M=pulse.M, raw=clipped, omega_max=opt_cfg.omega_max)
    violations = audit_adjacency(result, opt_cfg.adjacency_bound)
    if violations:
        warnings.warn(f"{len(violations)} adjacent-segment differences exceed the bound",
                      ConstraintAuditWarning)
    return result


def initial_parameters(model: SystemModel, opt_cfg: OptimizerConfig) -> np.ndarray:
    rng = np.random.default_rng(opt_cfg.rng_seed)
    amp = opt_cfg.initial_amplitude
    raw = rng.uniform(-amp, amp, size=(model.n_channels, opt_cfg.M))
    if opt_cfg.omega_max is not None:
        raw = np.clip(raw, -opt_cfg.omega_max, opt_cfg.omega_max)
    return raw


def run_grape(model: SystemModel, fitness_cfg: FitnessConfig, opt_cfg: OptimizerConfig,
              initial_raw: Optional[np.ndarray] = None) -> Tuple[PulseGrid, OptimizationTrace]:
    """
    Van Loan GRAPE: seeded start, projected L-BFGS ascent on Φ, λ decay
    while Φ₀ stays under threshold, best pulse selection.

    Args:
        model: Controlled system
        fitness_cfg: Robustness terms and fidelity threshold
        opt_cfg: Grid, bounds and iteration settings
        initial_raw: Optional starting parameters instead of the seeded draw

    Returns:
        (best pulse, trace)
    """
    threshold = opt_cfg.phi0_threshold if opt_cfg.phi0_threshold is not None else fitness_cfg.phi0_threshold
    scale = opt_cfg.scale
    bounds = (-1.0, 1.0) if opt_cfg.omega_max is not None else None
    raw0 = initial_parameters(model, opt_cfg) if initial_raw is None else np.asarray(initial_raw, float)
    shape = (model.n_channels, opt_cfg.M)
    if raw0.shape != shape:
        raise ValueError(f"initial parameters have shape {raw0.shape}, expected {shape}")

    def make_pulse(x: np.ndarray) -> PulseGrid:
        return PulseGrid(T=opt_cfg.T, M=opt_cfg.M, raw=x.reshape(shape) * scale,
                         smoothing_sigma=opt_cfg.smoothing_sigma, omega_max=opt_cfg.omega_max)

    trace = OptimizationTrace()
    round_cfg = fitness_cfg
    x = raw0.ravel() / scale
    best = None

    for round_index in range(opt_cfg.max_outer_rounds):
        cfg_now = round_cfg

        def fun(z: np.ndarray, need_gradient: bool):
            report = total_fitness(model, make_pulse(z), cfg_now, with_gradient=need_gradient)
            grad = report.gradient.ravel() * scale if need_gradient else None
            return report.phi, grad, report

        def record(iteration, z, evaluation, grad_norm, step):
            report = evaluation[2]
            trace.iterations.append(IterationRecord(
                round=round_index, iteration=iteration, phi0=report.phi0, phi=report.phi,
                penalties=dict(report.penalties), grad_norm=grad_norm, step=float(step)))

        x, reason = maximize_lbfgs(fun, x, opt_cfg, bounds, record, desc=f"Round {round_index + 1}")
        pulse = make_pulse(x)
        report = total_fitness(model, pulse, cfg_now)
        trace.rounds.append({
            "round": round_index,
            "weights": cfg_now.weights,
            "phi0": report.phi0,
            "phi": report.phi,
            "stop_reason": reason,
        })
        key = (report.phi0 >= threshold, report.phi)
        if best is None or key > best[0]:
            best = (key, pulse, report)
        has_weights = any(w > 0 for w in cfg_now.weights)
        if report.phi0 < threshold and has_weights:
            round_cfg = cfg_now.scaled(opt_cfg.lambda_decay)
        elif (opt_cfg.retighten and has_weights and report.phi0 >= threshold
              and (1.0 - threshold) > 10.0 * (1.0 - report.phi0)):
            round_cfg = cfg_now.scaled(1.0 / opt_cfg.lambda_decay)
        else:
            break

    _, best_pulse, best_report = best
    final = enforce_constraints(best_pulse, opt_cfg)
    trace.audit = audit_adjacency(final, opt_cfg.adjacency_bound)
    trace.final_pulse = final
    trace.final_report = best_report
    trace.status = "converged" if best_report.phi0 >= threshold else "best_effort"
    return final, trace
