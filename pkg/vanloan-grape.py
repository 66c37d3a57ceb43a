import argparse
import os
import sys
from datetime import datetime
from typing import List, Optional

import numpy as np
import psutil

from control_model import PulseGrid
from grape_optimizer import get_memory_usage, initial_parameters, run_grape
from noise_analysis import (
    StaticMode,
    default_omega_grid,
    filter_function,
    mc_noise_fidelity,
    overlap_infidelity,
    quasi_static_sweep,
    robust_region_fraction,
)
from robust_objective import FitnessConfig, total_fitness
from run_manifest import (
    ConfigError,
    RunConfig,
    __version__,
    parse_axis,
    parse_quantity,
    save_pulse,
    save_report,
    save_trace,
    write_csv,
)
from vanloan_propagation import GradientMode

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BEST_EFFORT = 2


def print_banner() -> None:
    print(f"Van Loan GRAPE v{__version__} - {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=========================")
    print(f"System Memory: {psutil.virtual_memory().total / (1024**3):.1f} GB")
    print(f"Available Memory: {psutil.virtual_memory().available / (1024**3):.1f} GB")
    print("=========================")


def load_config(args) -> RunConfig:
    print(f"Loading config: {args.config}")
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.optimizer.rng_seed = args.seed
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    cfg.fitness.threads = args.threads
    cfg.optimizer.progress = not args.quiet
    print(f"✓ System {cfg.system.name}: dim_full={cfg.system.model.dim_full}, "
          f"dim_q={cfg.system.model.dim_q}, channels={cfg.system.model.n_channels}")
    for name, message in cfg.system.fit_warnings().items():
        print(f"⚠ {name}: {message}")
    return cfg


def cmd_optimize(args) -> int:
    cfg = load_config(args)
    initial = None
    if cfg.pulse_file is not None:
        warm = cfg.load_pulse()
        if warm.M == cfg.optimizer.M:
            initial = warm.raw
            print("→ Warm start from configured pulse")
    print(f"\nOptimizing: T={cfg.optimizer.T:.6g} s, M={cfg.optimizer.M}, "
          f"{len(cfg.fitness.robustness_terms)} robustness term(s)")
    pulse, trace = run_grape(cfg.system.model, cfg.fitness, cfg.optimizer, initial_raw=initial)
    meta = cfg.metadata(cfg.seed, command="optimize", status=trace.status)
    os.makedirs(args.out, exist_ok=True)
    save_pulse(os.path.join(args.out, "pulse.json"), pulse, meta)
    trace_data = trace.to_dict()
    trace_data["noise_fits"] = cfg.system.fit_diagnostics()
    save_trace(os.path.join(args.out, "trace.json"), trace_data, meta)

    report = trace.final_report
    print(f"\nPhi0 = {report.phi0:.10f}, Phi = {report.phi:.10f}, leakage = {report.leakage:.3e}")
    for label, value in report.penalties.items():
        print(f"  {label}: {value:.6e}")
    for message in trace.audit:
        print(f"⚠ {message}")
    print(f"Output saved to: {os.path.abspath(args.out)}")
    print(f"Final memory usage: {get_memory_usage():.2f} MB")
    if trace.status != "converged":
        print("⚠ Best effort: Phi0 below threshold", file=sys.stderr)
        return EXIT_BEST_EFFORT
    print("✓ Converged")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    if args.realizations is not None:
        if args.realizations < 1:
            raise ConfigError(f"--realizations must be >= 1, got {args.realizations}")
        cfg.mc_realizations = args.realizations
    static_mode = StaticMode(args.static_mode) if args.static_mode else cfg.static_mode
    pulse = cfg.load_pulse(args.pulse)
    model = cfg.system.model

    report = total_fitness(model, pulse, cfg.fitness)
    result = {"fitness": report.to_dict(), "mc": None, "noise_fits": cfg.system.fit_diagnostics()}
    print(f"\nPhi0 = {report.phi0:.10f}, Phi = {report.phi:.10f}, leakage = {report.leakage:.3e}")
    for label, value in report.penalties.items():
        print(f"  {label}: {value:.6e}")

    noises = [n for n in cfg.noises().values() if n.strength > 0]
    if noises and not args.no_mc:
        rng = np.random.default_rng(cfg.seed)
        mean, stderr = mc_noise_fidelity(model, pulse, noises, cfg.mc_realizations, rng,
                                         static_mode=static_mode, threads=args.threads,
                                         progress=not args.quiet)
        result["mc"] = {
            "mean": mean,
            "stderr": stderr,
            "realizations": cfg.mc_realizations,
            "static_mode": static_mode.value,
            "strengths": {n.name: n.strength for n in noises},
        }
        print(f"MC fidelity = {mean:.6f} ± {stderr:.2e} over {cfg.mc_realizations} realizations")

    meta = cfg.metadata(cfg.seed, command="evaluate")
    save_report(os.path.join(args.out, "report.json"), result, meta)
    print(f"Output saved to: {os.path.abspath(args.out)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    pulse = cfg.load_pulse(args.pulse)
    axes = [parse_axis(cfg.system, spec, cfg.conversions) for spec in args.axis] if args.axis else cfg.sweep_axes
    if not axes:
        raise ConfigError("No sweep axes: pass --axis or set 'analysis.sweep'")
    grid = quasi_static_sweep(cfg.system.model, pulse, axes, progress=not args.quiet)
    threshold = cfg.fitness.phi0_threshold
    fraction = robust_region_fraction(grid, threshold)
    header = [ax.noise.name for ax in axes] + ["fidelity"]
    meta = cfg.metadata(cfg.seed, command="sweep")
    write_csv(os.path.join(args.out, "sweep.csv"), header, grid.rows(), meta)
    print(f"\nFidelity range: [{grid.fidelity.min():.6f}, {grid.fidelity.max():.6f}]")
    print(f"Robust fraction (F >= {threshold}): {fraction:.4f}")
    print(f"Output saved to: {os.path.abspath(args.out)}")
    return EXIT_OK


def cmd_filter_function(args) -> int:
    cfg = load_config(args)
    pulse = cfg.load_pulse(args.pulse)
    name = args.noise or cfg.filter_noise
    if name is None:
        candidates = [n for n, ch in cfg.system.noises.items() if not ch.is_static]
        if not candidates:
            raise ConfigError("No noise selected: pass --noise or set 'analysis.filter_noise'")
        name = candidates[0]
    noise = cfg.system.noise(name)
    strength = cfg.strengths.get(name, 0.0)
    psd = cfg.system.psd_for(name, strength) if name in cfg.system.psds else None

    if args.omega_min or args.omega_max or args.points:
        omega = default_omega_grid(
            psd, args.points or 400,
            parse_quantity(args.omega_min or "100 Hz", "--omega-min", "frequency", cfg.conversions),
            parse_quantity(args.omega_max or "100 MHz", "--omega-max", "frequency", cfg.conversions))
    elif cfg.omega_grid is not None:
        omega = cfg.omega_grid
    else:
        omega = default_omega_grid(psd)

    table = filter_function(cfg.system.model, pulse, noise, omega)
    meta = cfg.metadata(cfg.seed, command="filter-function", noise=name)
    write_csv(os.path.join(args.out, "filter_function.csv"),
              ["omega_rad_s", "F", "S", "S_F_over_w2"], table.rows(psd), meta)
    if psd is not None:
        fidelity = overlap_infidelity(psd, table)
        print(f"\nSpectral overlap fidelity for {name} (rms {strength:.6g}): {fidelity:.8f}")
    else:
        print(f"\n{name} has no spectrum; wrote F(omega) only")
    print(f"Output saved to: {os.path.abspath(args.out)}")
    return EXIT_OK


def gradient_check(cfg: RunConfig, samples: int, step: float, rng: np.random.Generator) -> float:
    """Max relative error between analytic and central-difference gradients on sampled components"""
    model = cfg.system.model
    raw = cfg.load_pulse().raw if cfg.pulse_file is not None else initial_parameters(model, cfg.optimizer)
    base = PulseGrid(T=cfg.optimizer.T, M=raw.shape[1], raw=raw, smoothing_sigma=cfg.optimizer.smoothing_sigma)
    fit_cfg: FitnessConfig = cfg.fitness
    analytic = total_fitness(model, base, fit_cfg, with_gradient=True).gradient
    h = step * cfg.optimizer.scale
    flat = rng.choice(raw.size, size=min(samples, raw.size), replace=False)
    numeric = np.empty(len(flat))
    for k, index in enumerate(flat):
        c, m = np.unravel_index(index, raw.shape)
        plus, minus = raw.copy(), raw.copy()
        plus[c, m] += h
        minus[c, m] -= h
        numeric[k] = (total_fitness(model, base.with_raw(plus), fit_cfg).phi
                      - total_fitness(model, base.with_raw(minus), fit_cfg).phi) / (2 * h)
    picked = analytic.ravel()[flat]
    floor = 1e-3 * max(float(np.max(np.abs(numeric))), 1e-300)
    return float(np.max(np.abs(picked - numeric) / np.maximum(np.abs(numeric), floor)))


def cmd_grad_check(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg.fitness.gradient_mode = GradientMode.from_name(args.mode)
    error = gradient_check(cfg, args.samples, args.step, np.random.default_rng(cfg.seed))
    print(f"\nGradient mode: {cfg.fitness.gradient_mode.value}")
    print(f"Max relative error: {error:.3e} (tolerance {args.tol:.1e})")
    if error < args.tol:
        print("✓ Gradient check passed")
        return EXIT_OK
    print("✗ Gradient check failed", file=sys.stderr)
    return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vanloan-grape",
                                     description="Robust quantum gate synthesis with Van Loan GRAPE")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="Run configuration (JSON)")
    common.add_argument("--out", default="output", help="Output folder")
    common.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="Worker threads for MC and per-term propagation")
    common.add_argument("--quiet", action="store_true", help="Disable progress bars")
    pulse_arg = argparse.ArgumentParser(add_help=False)
    pulse_arg.add_argument("--pulse", default=None, help="Pulse file, or 'original' for the preset baseline")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("optimize", parents=[common], help="Run Van Loan GRAPE")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", parents=[common, pulse_arg], help="Fidelity, penalties and MC ensemble")
    p.add_argument("--realizations", type=int, default=None, help="Monte-Carlo realizations")
    p.add_argument("--static-mode", choices=[m.value for m in StaticMode], default=None)
    p.add_argument("--no-mc", action="store_true", help="Skip the Monte-Carlo ensemble")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common, pulse_arg], help="Quasi-static fidelity grid")
    p.add_argument("--axis", action="append", default=[], help="name:start:stop:count, repeatable (max 2)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("filter-function", parents=[common, pulse_arg], help="Filter function and spectral overlap")
    p.add_argument("--noise", default=None, help="Noise channel name")
    p.add_argument("--omega-min", default=None, help="Lower grid edge, e.g. '100 Hz'")
    p.add_argument("--omega-max", default=None, help="Upper grid edge, e.g. '100 MHz'")
    p.add_argument("--points", type=int, default=None, help="Log-spaced grid points")
    p.set_defaults(func=cmd_filter_function)

    p = sub.add_parser("grad-check", parents=[common], help="Analytic vs finite-difference gradient")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=20, help="Sampled gradient components")
    p.add_argument("--step", type=float, default=1e-6, help="Finite-difference step relative to the pulse scale")
    p.add_argument("--mode", choices=["exact", "first_order"], default=None)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_ERROR
    print_banner()
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
