"""Command-line entry point wiring the certification stages together.

Each subcommand runs one stage against a network config and writes its
artifacts into a flat output directory; ``pipeline`` chains them all.
Standalone stages read whatever upstream artifacts they need from the same
directory, so partial reruns stay cheap and auditable.  Every run rewrites
``manifest.json`` listing the stages it executed, their artifacts, and
pass/fail.  Exit status: 0 all checks passed, 1 a verification failed,
2 the configuration was unusable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .lyapunov import (
    AsymmetricGrid,
    OutsideBox,
    extend_even,
    dump_field,
    load_field,
    norm_field,
    tabulate_value_function,
    verify_differential_decrease,
    verify_integral_decrease,
)
from .neighbor import StartOutsideOrthant, verify_assumption_a
from .network import (
    EmptyVelocitySet,
    NetworkValidationError,
    SequenceNotConverging,
    dump_network,
    load_network,
    usc_probe,
    validate_network,
)
from .smoothing import (
    BoxTooSmall,
    DegenerateBox,
    NonpositiveRadius,
    PieceBoundUnachievable,
    build_partition,
    glue,
    gluing_error_report,
    uoc_check,
)
from .stability import (
    HorizonTooShort,
    StabilityCertificate,
    Unstable,
    drain_envelope_margin,
    estimate_tau,
    load_certificate,
    sample_unit_starts,
    verify_epsilon_delta,
)
from .trajectory import (
    IllegalClamp,
    MinNormRule,
    default_rule_set,
    dump_trajectory,
    lipschitz_check,
    simulate,
)

PIPELINE_STAGES = ("validate", "stability", "lyapunov", "smooth", "glue",
                   "verify-decrease", "verify-assumption-a")
ALL_COMMANDS = PIPELINE_STAGES + ("simulate", "usc-probe", "pipeline")

DECREASE_TOL_INTEGRAL = 5e-3
DECREASE_TOL_DIFFERENTIAL = 1e-2
ASSUMPTION_A_TOL = 1e-3
USC_SEQUENCE_LENGTH = 64


class ConfigError(ValueError):
    """Unusable flags, missing files, or malformed configuration."""


def bundled_config() -> Path:
    """Path of the packaged single-station reference network."""
    return Path(resources.files("lyapforge") / "configs" / "single_station.json")


@dataclass
class RunConfig:
    """All knobs for one run; fixed seed makes artifacts byte-identical."""

    network: Path
    out: Path
    h: float = 1e-3
    horizon: float = 2.5
    grid_lo: str = "0"
    grid_hi: str = "3"
    grid_step: float = 0.05
    radius: float | None = None
    radius_ladder: tuple = (0.4, 0.2, 0.1, 0.05)
    pieces: int = 3
    overlap: float = 0.25
    samples: int = 16
    seed: int = 0
    threads: int = 1

    def box(self, dim: int):
        lo = _parse_vector(self.grid_lo, dim, "--grid-lo")
        hi = _parse_vector(self.grid_hi, dim, "--grid-hi")
        if np.any(hi <= lo):
            raise ConfigError("--grid-hi must exceed --grid-lo")
        return lo, hi

    def pad(self, dim: int) -> np.ndarray:
        # base gluing radius per axis: quarter of the widened piece width of
        # the partition on the even-extended box [-hi, hi]
        _, hi = self.box(dim)
        return 2.0 * hi / self.pieces * (1.0 + 2.0 * self.overlap) / 4.0


@dataclass
class StageResult:
    stage: str
    passed: bool
    artifacts: list = field(default_factory=list)
    lines: list = field(default_factory=list)


def _parse_vector(text: str, dim: int, flag: str) -> np.ndarray:
    try:
        parts = [float(p) for p in str(text).split(",")]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated floats, got {text!r}") from exc
    if len(parts) == 1:
        return np.full(dim, parts[0])
    if len(parts) != dim:
        raise ConfigError(f"{flag}: expected 1 or {dim} entries, got {len(parts)}")
    return np.asarray(parts)


def _parse_ladder(text: str) -> tuple:
    try:
        radii = tuple(float(p) for p in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"--radius-ladder: bad float in {text!r}") from exc
    if not radii or any(r <= 0 for r in radii):
        raise ConfigError("--radius-ladder: radii must be positive")
    if list(radii) != sorted(radii, reverse=True):
        raise ConfigError("--radius-ladder: radii must be strictly decreasing")
    return radii


def _dump_json(doc: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _need_spec(cfg: RunConfig, ctx: dict):
    if "spec" not in ctx:
        ctx["spec"] = validate_network(load_network(cfg.network))
    return ctx["spec"]


def _need_cert(cfg: RunConfig, ctx: dict) -> StabilityCertificate:
    if "cert" not in ctx:
        path = cfg.out / "stability_certificate.json"
        if not path.exists():
            raise ConfigError(f"missing {path.name}; run the stability stage first")
        ctx["cert"] = load_certificate(path)
    return ctx["cert"]


def _need_field(cfg: RunConfig, ctx: dict, key: str, filename: str):
    if key not in ctx:
        path = cfg.out / filename
        if not path.exists():
            raise ConfigError(f"missing {path.name}; run the upstream stage first")
        ctx[key] = load_field(path)
    return ctx[key]


def _stage_validate(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    dump_network(spec, cfg.out / "network_validated.json")
    lines = [f"stations={spec.stations} classes={spec.classes}",
             f"spectral_radius={spec.spectral_radius:.6g} lipschitz={spec.lipschitz:.6g}"]
    return StageResult("validate", True, ["network_validated.json"], lines)


def _stage_simulate(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    _, hi = cfg.box(spec.classes)
    starts = sample_unit_starts(spec.classes, cfg.samples, cfg.seed) * (hi.max() / 2.0)
    rules = default_rule_set(spec)
    artifacts, worst = [], -np.inf
    for k, x0 in enumerate(starts):
        rule = rules[k % len(rules)]
        tr = simulate(spec, x0, cfg.h, cfg.horizon, rule=rule)
        name = f"trajectory_{k:03d}.csv"
        dump_trajectory(tr, cfg.out / name)
        artifacts.append(name)
        worst = max(worst, lipschitz_check(tr).worst_margin)
    _dump_json({"trajectories": artifacts, "worst_lipschitz_margin": worst,
                "passed": True}, cfg.out / "simulate_report.json")
    artifacts.append("simulate_report.json")
    return StageResult("simulate", True, artifacts,
                       [f"{len(starts)} trajectories, worst speed margin {worst:.3e}"])


def _stage_stability(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    starts = sample_unit_starts(spec.classes, cfg.samples, cfg.seed)
    cert = estimate_tau(spec, starts, step=cfg.h, horizon=cfg.horizon)
    ctx["cert"] = cert
    cert.dump(cfg.out / "stability_certificate.json")
    env_worst, shift_worst = -np.inf, -np.inf
    for x0 in starts:
        for rule in default_rule_set(spec):
            tr = simulate(spec, x0, cfg.h, cfg.horizon, rule=rule)
            env_worst = max(env_worst, drain_envelope_margin(tr, cert).worst_margin)
            shift_worst = max(shift_worst, verify_epsilon_delta(tr, cert).worst_margin)
    passed = env_worst <= 1e-6 and shift_worst <= 1e-6
    _dump_json({"envelope_worst_margin": env_worst,
                "shift_bound_worst_margin": shift_worst,
                "tolerance": 1e-6, "passed": passed},
               cfg.out / "stability_checks.json")
    lines = [f"tau={cert.tau:.6g} residual={cert.max_residual:.3e}",
             f"envelope margin {env_worst:.3e}, shift margin {shift_worst:.3e}"]
    return StageResult("stability", passed,
                       ["stability_certificate.json", "stability_checks.json"], lines)


def _stage_lyapunov(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    cert = _need_cert(cfg, ctx)
    lo, hi = cfg.box(spec.classes)
    if np.any(lo != 0.0):
        raise ConfigError("--grid-lo must be 0 so the field admits an even extension")
    hi_pad = hi + cfg.pad(spec.classes)
    v = tabulate_value_function(spec, cert, lo, hi_pad, cfg.grid_step,
                                step=cfg.h, name="V")
    w = norm_field(lo, hi_pad, cfg.grid_step)
    ctx["v"], ctx["w"] = v, w
    dump_field(v, cfg.out / "value_function.csv")
    dump_field(w, cfg.out / "rate_function.csv")
    flat = v.values.reshape(-1)
    origin = float(v.value(np.zeros(spec.classes)))
    passed = origin == 0.0 and bool(np.all(flat >= 0.0))
    lines = [f"V on [0, {hi_pad.max():g}] step {cfg.grid_step:g}, "
             f"max {flat.max():.6g}, origin {origin:g}"]
    return StageResult("lyapunov", passed,
                       ["value_function.csv", "value_function.csv.json",
                        "rate_function.csv", "rate_function.csv.json"], lines)


def _stage_smooth(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    v = ctx.get("v") or _need_field(cfg, ctx, "v", "value_function.csv")
    w = ctx.get("w") or _need_field(cfg, ctx, "w", "rate_function.csv")
    _, hi = cfg.box(spec.classes)
    pad = cfg.pad(spec.classes)
    if max(cfg.radius_ladder) > pad.min():
        raise ConfigError("--radius-ladder exceeds the field padding; "
                          "shrink the radii or enlarge the box")
    v_even = extend_even(v)
    w_even = extend_even(w)
    ctx["v_even"], ctx["w_even"] = v_even, w_even
    dump_field(v_even, cfg.out / "value_even.csv")
    dump_field(w_even, cfg.out / "rate_even.csv")
    report = uoc_check(v_even, cfg.radius_ladder, lo=-hi, hi=hi)
    _dump_json(report.to_dict(), cfg.out / "uoc_report.json")
    lines = ["uoc distances " + ", ".join(f"{d:.3e}" for d in report.distances)]
    return StageResult("smooth", report.passed,
                       ["value_even.csv", "value_even.csv.json",
                        "rate_even.csv", "rate_even.csv.json", "uoc_report.json"],
                       lines)


def _stage_glue(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    v_even = ctx.get("v_even") or _need_field(cfg, ctx, "v_even", "value_even.csv")
    w_even = ctx.get("w_even") or _need_field(cfg, ctx, "w_even", "rate_even.csv")
    _, hi = cfg.box(spec.classes)
    pou = build_partition(-hi, hi, cfg.pieces, cfg.overlap, cfg.grid_step,
                          v_field=v_even, w_field=w_even)
    result = glue(v_even, w_even, pou, base_radius=cfg.radius)
    ctx["v_s"], ctx["w_s"] = result.v_s, result.w_s
    dump_field(result.v_s, cfg.out / "glued_value.csv")
    dump_field(result.w_s, cfg.out / "glued_rate.csv")
    result.dump_report(cfg.out / "glue_report.json")
    err = gluing_error_report(result.v_s, v_even)
    _dump_json(err.to_dict(), cfg.out / "glue_error_report.json")
    lines = ["piece radii " + ", ".join(f"{p.radius:.3e}" for p in result.pieces),
             f"gluing error margin {err.worst_margin:.3e}"]
    return StageResult("glue", err.passed,
                       ["glued_value.csv", "glued_value.csv.json",
                        "glued_rate.csv", "glued_rate.csv.json",
                        "glue_report.json", "glue_error_report.json"], lines)


def _decrease_starts(cfg: RunConfig, dim: int, hi: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + 1)
    starts = rng.uniform(0.0, 1.0, size=(cfg.samples, dim)) * hi[None, :]
    low = np.linalg.norm(starts, axis=1) < 0.1 * hi.max()
    starts[low] += 0.2 * hi[None, :]
    return starts


def _stage_verify_decrease(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    cert = _need_cert(cfg, ctx)
    v = ctx.get("v") or _need_field(cfg, ctx, "v", "value_function.csv")
    w = ctx.get("w") or _need_field(cfg, ctx, "w", "rate_function.csv")
    v_s = ctx.get("v_s") or _need_field(cfg, ctx, "v_s", "glued_value.csv")
    w_s = ctx.get("w_s") or _need_field(cfg, ctx, "w_s", "glued_rate.csv")
    _, hi = cfg.box(spec.classes)
    int_worst, diff_worst = -np.inf, -np.inf
    for x0 in _decrease_starts(cfg, spec.classes, hi):
        horizon = cert.tau * float(np.linalg.norm(x0)) * 1.2 + 10 * cfg.h
        tr = simulate(spec, x0, cfg.h, horizon, rule=MinNormRule())
        int_worst = max(int_worst, verify_integral_decrease(
            v, w, tr, tol=DECREASE_TOL_INTEGRAL).worst_margin)
        diff_worst = max(diff_worst, verify_differential_decrease(
            v_s, w_s, tr, tol=DECREASE_TOL_DIFFERENTIAL).worst_margin)
    passed = (int_worst <= DECREASE_TOL_INTEGRAL
              and diff_worst <= DECREASE_TOL_DIFFERENTIAL)
    _dump_json({"integral_worst_margin": int_worst,
                "integral_tolerance": DECREASE_TOL_INTEGRAL,
                "differential_worst_margin": diff_worst,
                "differential_tolerance": DECREASE_TOL_DIFFERENTIAL,
                "trajectories": cfg.samples, "passed": passed},
               cfg.out / "decrease_report.json")
    lines = [f"integral margin {int_worst:.3e}, differential margin {diff_worst:.3e}"]
    return StageResult("verify-decrease", passed, ["decrease_report.json"], lines)


def _stage_assumption_a(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    _, hi = cfg.box(spec.classes)
    x0 = 0.5 * hi
    ref = simulate(spec, x0, cfg.h, cfg.horizon, rule=MinNormRule())
    rng = np.random.default_rng(cfg.seed + 2)
    fractions = rng.uniform(0.05, 0.25, size=cfg.samples)
    signs = np.resize([1.0, -1.0], cfg.samples)
    ys = [s * f * x0 for s, f in zip(signs, fractions)]
    norm0 = float(np.linalg.norm(x0))
    report = verify_assumption_a(spec, ref, ys, cfg.horizon,
                                 c=lambda t: t / norm0,
                                 c_tag=f"t/|phi0|, |phi0|={norm0:.6g}",
                                 tol=ASSUMPTION_A_TOL, workers=cfg.threads)
    report.dump_csv(cfg.out / "assumption_a.csv")
    report.dump_summary(cfg.out / "assumption_a_summary.json")
    lines = [f"c tested: {report.c_tag}; worst margin {report.worst_margin:.3e}"]
    return StageResult("verify-assumption-a", report.passed,
                       ["assumption_a.csv", "assumption_a_summary.json"], lines)


def _stage_usc_probe(cfg: RunConfig, ctx: dict) -> StageResult:
    spec = _need_spec(cfg, ctx)
    n = spec.classes
    sequence = [np.ones(n) / k for k in range(1, USC_SEQUENCE_LENGTH + 1)]
    report = usc_probe(spec, np.zeros(n), sequence)
    _dump_json(report.to_dict(), cfg.out / "usc_report.json")
    if report.passed:
        lines = ["no upper-semicontinuity witness along the probe sequence"]
    else:
        lines = [f"witness velocity {np.asarray(report.witness).tolist()} at distance "
                 f"{report.witness_distance:.6g} from the limit set"]
    return StageResult("usc-probe", True, ["usc_report.json"], lines)


STAGE_FUNCS = {
    "validate": _stage_validate,
    "simulate": _stage_simulate,
    "stability": _stage_stability,
    "lyapunov": _stage_lyapunov,
    "smooth": _stage_smooth,
    "glue": _stage_glue,
    "verify-decrease": _stage_verify_decrease,
    "verify-assumption-a": _stage_assumption_a,
    "usc-probe": _stage_usc_probe,
}

VERIFICATION_ERRORS = (NetworkValidationError, Unstable, HorizonTooShort,
                       IllegalClamp, PieceBoundUnachievable, EmptyVelocitySet,
                       SequenceNotConverging, StartOutsideOrthant)
CONFIGURATION_ERRORS = (ConfigError, DegenerateBox, BoxTooSmall, NonpositiveRadius,
                        AsymmetricGrid, OutsideBox, FileNotFoundError, KeyError,
                        json.JSONDecodeError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lyapforge",
        description="Certify fluid-network stability: simulate the inclusion, "
                    "estimate the drain time, build and smooth the Lyapunov pair, "
                    "and check the decrease and neighboring-trajectory bounds.")
    parser.add_argument("command", choices=ALL_COMMANDS)
    parser.add_argument("--config", type=Path, default=None,
                        help="network JSON (default: bundled single station)")
    parser.add_argument("--out", type=Path, default=Path("lyapforge_out"))
    parser.add_argument("--h", type=float, default=1e-3, help="Euler step")
    parser.add_argument("--horizon", type=float, default=2.5)
    parser.add_argument("--grid-lo", default="0")
    parser.add_argument("--grid-hi", default="3")
    parser.add_argument("--grid-step", type=float, default=0.05)
    parser.add_argument("--radius", type=float, default=None,
                        help="override the base gluing radius")
    parser.add_argument("--radius-ladder", default="0.4,0.2,0.1,0.05")
    parser.add_argument("--pieces", type=int, default=3)
    parser.add_argument("--overlap", type=float, default=0.25)
    parser.add_argument("--samples", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def _build_config(args) -> RunConfig:
    network = args.config if args.config is not None else bundled_config()
    if not Path(network).exists():
        raise ConfigError(f"network config not found: {network}")
    threads_env = os.environ.get("LYAPFORGE_THREADS", "1")
    try:
        threads = int(threads_env)
    except ValueError as exc:
        raise ConfigError(f"LYAPFORGE_THREADS must be an integer, got {threads_env!r}") from exc
    if threads < 1:
        raise ConfigError("LYAPFORGE_THREADS must be at least 1")
    for flag, value in (("--h", args.h), ("--horizon", args.horizon),
                        ("--grid-step", args.grid_step)):
        if value <= 0:
            raise ConfigError(f"{flag} must be positive")
    if args.samples < 1 or args.pieces < 1:
        raise ConfigError("--samples and --pieces must be at least 1")
    return RunConfig(network=Path(network), out=Path(args.out), h=args.h,
                     horizon=args.horizon, grid_lo=args.grid_lo,
                     grid_hi=args.grid_hi, grid_step=args.grid_step,
                     radius=args.radius, radius_ladder=_parse_ladder(args.radius_ladder),
                     pieces=args.pieces, overlap=args.overlap,
                     samples=args.samples, seed=args.seed, threads=threads)


def _write_manifest(out: Path, results: list, status: int) -> None:
    doc = {"stages": [{"stage": r.stage, "passed": r.passed, "artifacts": r.artifacts}
                      for r in results],
           "exit_status": status}
    _dump_json(doc, out / "manifest.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
    except CONFIGURATION_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    cfg.out.mkdir(parents=True, exist_ok=True)

    stages = PIPELINE_STAGES if args.command == "pipeline" else (args.command,)
    ctx: dict = {}
    results: list = []
    status = 0
    for stage in stages:
        try:
            result = STAGE_FUNCS[stage](cfg, ctx)
        except VERIFICATION_ERRORS as exc:
            print(f"[{stage}] FAIL {type(exc).__name__}: {exc}")
            results.append(StageResult(stage, False, [], [str(exc)]))
            status = 1
            break
        except CONFIGURATION_ERRORS as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            _write_manifest(cfg.out, results, 2)
            return 2
        results.append(result)
        tag = "ok" if result.passed else "FAIL"
        for line in result.lines:
            print(f"[{stage}] {line}")
        print(f"[{stage}] {tag}")
        if not result.passed:
            status = 1
            break
    _write_manifest(cfg.out, results, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
