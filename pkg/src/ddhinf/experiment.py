"""Config-driven scenarios: collect data, synthesize the baseline, static and
moving-horizon controllers, simulate them on one shared disturbance realization,
audit, and persist everything."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import audit, sdp
from .datagen import DataSet, consistency_form, excite, noise_model_pointwise, slater_point
from .mhc import run_moving_horizon
from .plant import PlantModel, TrajectoryLog, decaying_disturbance, example44, linear_feedback, simulate
from .synth import SynthesisSpec, build_baseline, extract_controller, search_r0, synthesize

CONTROLLERS = ("baseline", "static", "moving_horizon")
TOL_ENV = "DDHINF_SOLVER_TOL"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    J: int = 100
    eps: float = 1e-2
    input_bound: float = 5.0
    state_bound: float = 5.0
    episode_length: int = 1
    seed: int = 0


@dataclass
class NoiseConfig:
    model: str = "pointwise"


@dataclass
class SynthesisConfig:
    sigma0: float = 1e-2
    r0: float = 10.0
    r_policy: str = "constant"
    controllers: list = field(default_factory=lambda: list(CONTROLLERS))


@dataclass
class DisturbanceConfig:
    profile: str = "decaying"
    rho: float = 0.85
    energy: float | None = None  # defaults to sigma0
    seed: int = 1


@dataclass
class SimulationConfig:
    x0: list = field(default_factory=lambda: [0.95, 0.0, 0.0])
    T: int = 200
    headroom: float = 1.0
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)


@dataclass
class OutputConfig:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])


@dataclass
class ScenarioConfig:
    plant: object = "example44"
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ScenarioConfig":
        if self.simulation.T < 1:
            raise ConfigError("simulation.T must be >= 1")
        if self.data.J < 1:
            raise ConfigError("data.J must be >= 1")
        if not self.data.eps > 0:
            raise ConfigError("data.eps must be positive")
        if not self.synthesis.sigma0 > 0 or not self.synthesis.r0 > 0:
            raise ConfigError("synthesis.sigma0 and synthesis.r0 must be positive")
        if self.synthesis.r_policy not in ("constant", "search"):
            raise ConfigError("synthesis.r_policy must be 'constant' or 'search'")
        if self.noise.model != "pointwise":
            raise ConfigError("only the 'pointwise' noise model is available")
        if self.simulation.disturbance.profile not in ("decaying", "zero"):
            raise ConfigError("disturbance.profile must be 'decaying' or 'zero'")
        if not self.simulation.headroom > 0:
            raise ConfigError("simulation.headroom must be positive")
        bad = set(self.synthesis.controllers) - set(CONTROLLERS)
        if bad:
            raise ConfigError(f"unknown controllers {sorted(bad)}")
        self.build_plant()
        return self

    def build_plant(self) -> PlantModel:
        if self.plant == "example44":
            return example44()
        if isinstance(self.plant, dict):
            keys = {"A", "B", "C1", "D1", "C2", "D2", "y2max"}
            if set(self.plant) != keys:
                raise ConfigError(f"plant needs exactly the keys {sorted(keys)}")
            try:
                return PlantModel(**self.plant)
            except ValueError as exc:
                raise ConfigError(f"invalid plant: {exc}") from exc
        raise ConfigError("plant must be 'example44' or a matrix mapping")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = known[k].default_factory() if callable(known[k].default_factory) else None
        if hasattr(default, "__dataclass_fields__"):
            kwargs[k] = _build(type(default), v, f"{path}.{k}")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def load_config(source=None) -> ScenarioConfig:
    """Read a YAML scenario file (path or mapping); missing keys take defaults."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        with open(source) as fh:
            data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        cfg = _build(ScenarioConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def solver_settings() -> sdp.SolverSettings:
    s = sdp.SolverSettings()
    tol = os.environ.get(TOL_ENV)
    if tol:
        s.tol_feas = s.tol_gap = float(tol)
    return s


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


def collect_data(cfg: ScenarioConfig) -> DataSet:
    d = cfg.data
    return excite(cfg.build_plant(), d.J, d.input_bound, d.eps, d.seed, d.state_bound, d.episode_length)


def make_spec(cfg: ScenarioConfig, data: DataSet) -> SynthesisSpec:
    plant = cfg.build_plant()
    noise = noise_model_pointwise(cfg.data.eps, data.J, data.n)
    form = consistency_form(data.without_truth(), noise)
    slater_point(data, form)
    return SynthesisSpec.for_plant(form, plant, cfg.simulation.x0,
                                   sigma0=cfg.synthesis.sigma0, r0=cfg.synthesis.r0)


def make_disturbance(cfg: ScenarioConfig) -> np.ndarray:
    sim = cfg.simulation
    n = cfg.build_plant().n
    if sim.disturbance.profile == "zero":
        return np.zeros((sim.T, n))
    energy = cfg.synthesis.sigma0 if sim.disturbance.energy is None else sim.disturbance.energy
    return decaying_disturbance(n, sim.T, energy, sim.disturbance.rho, sim.disturbance.seed)


@dataclass
class ControllerRun:
    name: str
    feasible: bool
    gammas: list
    log: object = None
    audit: audit.AuditReport | None = None
    certificate: dict = field(default_factory=dict)
    solve_times: list = field(default_factory=list)
    constraint_excess: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        st = np.array(self.solve_times) if self.solve_times else np.array([np.nan])
        return {
            "feasible": self.feasible,
            "gamma": self.gammas,
            "constraint_excess": self.constraint_excess,
            "audit": self.audit.to_dict() if self.audit else None,
            "timing": {"mean": float(np.mean(st)), "max": float(np.max(st)), "count": len(self.solve_times)},
            **self.extra,
        }


@dataclass
class ComparisonReport:
    runs: dict
    data_hash: str
    disturbance_hash: str
    claims: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def audits_ok(self) -> bool:
        return all(r.audit is None or r.audit.ok for r in self.runs.values())

    @property
    def failed_claims(self) -> list[str]:
        return [k for k, v in self.claims.items() if not v]

    def to_dict(self) -> dict:
        return {
            "data_hash": self.data_hash,
            "disturbance_hash": self.disturbance_hash,
            "controllers": {k: r.summary() for k, r in self.runs.items()},
            "claims": self.claims,
            "wall_time": self.wall_time,
        }


def _fixed_gain_run(name, plant, ctrl, cfg, w, constrained: bool) -> ControllerRun:
    sim = cfg.simulation
    log = simulate(plant, linear_feedback(ctrl.K), sim.x0, w, sim.T, meta={"controller": name})
    cert = {"gamma_bar": ctrl.gamma, "P0": ctrl.P.tolist()}
    if constrained:
        cert.update({"P": ctrl.P.tolist(), "r": cfg.synthesis.r0, "sigma0": cfg.synthesis.sigma0,
                     "gamma": ctrl.gamma, "y2max": plant.y2max.tolist()})
    rep = audit_from_certificate(log, cert)
    excess = audit.constraint_report(log, plant.y2max).excess.tolist()
    return ControllerRun(name, True, [ctrl.gamma] * sim.T, log, rep, cert,
                         constraint_excess=excess, extra={"controller": ctrl.to_dict()})


def audit_from_certificate(log, cert: dict) -> audit.AuditReport:
    return audit.run_audits(
        log,
        y2max=cert.get("y2max"),
        gamma_bar=cert.get("gamma_bar"),
        P0=None if cert.get("P0") is None else np.array(cert["P0"]),
        P=None if cert.get("P") is None else np.array(cert["P"]),
        r=cert.get("r"),
        sigma0=cert.get("sigma0"),
        gamma=cert.get("gamma"),
    )


def compare(cfg: ScenarioConfig, data: DataSet | None = None) -> ComparisonReport:
    """Run every requested controller on one dataset and one disturbance sequence."""
    t0 = time.perf_counter()
    plant = cfg.build_plant()
    data = collect_data(cfg) if data is None else data
    spec = make_spec(cfg, data)
    settings = solver_settings()
    w = make_disturbance(cfg)
    runs: dict[str, ControllerRun] = {}
    wanted = cfg.synthesis.controllers

    if "baseline" in wanted:
        rep = sdp.solve(build_baseline(spec), settings)
        if rep.optimal:
            runs["baseline"] = _fixed_gain_run("baseline", plant, extract_controller(spec, rep), cfg, w, False)
            runs["baseline"].solve_times = [rep.solve_time]
        else:
            runs["baseline"] = ControllerRun("baseline", False, [])

    if "static" in wanted or "moving_horizon" in wanted:
        if cfg.synthesis.r_policy == "search":
            r0, _ = search_r0(spec, settings=settings)
            if np.isfinite(r0):
                cfg.synthesis.r0 = r0
                spec = make_spec(cfg, data)
        ctrl, rep = synthesize(spec, settings)  # raises InfeasibleError at t = 0
        if "static" in wanted:
            runs["static"] = _fixed_gain_run("static", plant, ctrl, cfg, w, True)
            runs["static"].solve_times = [rep.solve_time]

    if "moving_horizon" in wanted:
        mh = run_moving_horizon(plant, spec, w, cfg.simulation.T, cfg.simulation.headroom, settings)
        hist = mh.state.history
        fresh = [h["gamma"] for h in hist if h["source"] == "fresh-solve"]
        cert = {"gamma_bar": max(fresh), "P0": mh.P0.tolist(), "y2max": plant.y2max.tolist()}
        run = ControllerRun(
            "moving_horizon",
            all(h["feasible"] for h in hist),
            [h["gamma"] for h in hist],
            mh.log,
            audit_from_certificate(mh.log, cert),
            cert,
            [h["solve_time"] for h in hist],
            audit.constraint_report(mh.log, plant.y2max).excess.tolist(),
            extra={
                "eta": [h["eta"] for h in hist],
                "fallbacks": int(sum(h["fallback"] for h in hist)),
                "r_searches": int(sum(h["r_search"] for h in hist)),
                "guarantee_suspended": mh.state.guarantee_suspended,
                "min_prev_residual": min((h["prev_residual"] for h in hist[1:]), default=None),
            },
        )
        run.history = hist  # type: ignore[attr-defined]
        runs["moving_horizon"] = run

    return ComparisonReport(runs, _digest(data.Xplus, data.X, data.U), _digest(w),
                            wall_time=time.perf_counter() - t0)


def _write_plot_data(out: Path, report: ComparisonReport) -> None:
    names = [k for k, r in report.runs.items() if r.log is not None]
    if not names:
        return
    T = len(report.runs[names[0]].log)
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    with open(plots / "gamma.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + names)
        for t in range(T):
            wr.writerow([t] + [f"{report.runs[k].gammas[t]:.17g}" for k in names])
    with open(plots / "u.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        m = report.runs[names[0]].log.u.shape[1]
        wr.writerow(["t"] + [f"{k}_u{i + 1}" for k in names for i in range(m)])
        for t in range(T):
            wr.writerow([t] + [f"{v:.17g}" for k in names for v in report.runs[k].log.u[t]])
    with open(plots / "x.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        n = report.runs[names[0]].log.x.shape[1]
        wr.writerow(["t"] + [f"{k}_x{i + 1}" for k in names for i in range(n)])
        for t in range(T):
            wr.writerow([t] + [f"{v:.17g}" for k in names for v in report.runs[k].log.x[t]])


def write_artifacts(out, cfg: ScenarioConfig, data: DataSet, report: ComparisonReport) -> Path:
    out = Path(out)
    for sub in ("controllers", "trajectories", "audits", "diagnostics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    data.save(out / "dataset")
    for name, run in report.runs.items():
        if run.log is None:
            continue
        run.log.to_csv(out / "trajectories" / f"{name}.csv")
        run.audit.to_json(out / "audits" / f"{name}.json")
        with open(out / "audits" / f"{name}.certificate.json", "w") as fh:
            json.dump(run.certificate, fh, indent=2)
        if "controller" in run.extra:
            with open(out / "controllers" / f"{name}.json", "w") as fh:
                json.dump(run.extra["controller"], fh, indent=2)
        if hasattr(run, "history"):
            with open(out / "diagnostics" / f"{name}.jsonl", "w") as fh:
                for h in run.history:
                    fh.write(json.dumps(h, default=float) + "\n")
    _write_plot_data(out, report)
    with open(out / "comparison.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, default=float)
    return out


def run_scenario(cfg: ScenarioConfig, out=None) -> tuple[ComparisonReport, Path]:
    data = collect_data(cfg)
    report = compare(cfg, data)
    path = write_artifacts(out or cfg.outputs.directory, cfg, data, report)
    return report, path


def reaudit(directory) -> dict[str, tuple[audit.AuditReport, audit.AuditReport]]:
    """Re-run every stored audit from its trajectory CSV and certificate."""
    d = Path(directory)
    out = {}
    for cert_path in sorted((d / "audits").glob("*.certificate.json")):
        name = cert_path.name.split(".")[0]
        cert = json.loads(cert_path.read_text())
        log = TrajectoryLog.from_csv(d / "trajectories" / f"{name}.csv")
        fresh = audit_from_certificate(log, cert)
        stored = audit.AuditReport.from_json(d / "audits" / f"{name}.json")
        out[name] = (fresh, stored)
    return out


def example_config(**overrides) -> ScenarioConfig:
    """Built-in configuration of the benchmark comparison."""
    cfg = load_config(None)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def evaluate_claims(report: ComparisonReport, y2max) -> dict[str, bool]:
    runs = report.runs
    claims = {}
    if "baseline" in runs and runs["baseline"].log is not None:
        claims["baseline_violates_u_limit"] = bool(np.max(runs["baseline"].log.y2[:, 1]) > y2max[1])
    for k in ("static", "moving_horizon"):
        if k in runs:
            claims[f"{k}_satisfies_constraints"] = bool(
                runs[k].log is not None and np.all(np.array(runs[k].constraint_excess) <= audit.TAU_ABS)
            )
    if "moving_horizon" in runs:
        mh = runs["moving_horizon"]
        claims["moving_horizon_feasible_every_step"] = bool(
            mh.feasible and mh.extra["fallbacks"] == 0 and mh.extra["r_searches"] == 0
        )
        eta = np.array(mh.extra["eta"])
        claims["moving_horizon_gamma_nonincreasing"] = bool(np.all(np.diff(eta) >= -1e-9))
        if "static" in runs:
            claims["moving_horizon_final_gamma_below_static"] = bool(mh.gammas[-1] < runs["static"].gammas[0])
    return claims


def reproduce_example(out=None) -> ComparisonReport:
    """Benchmark three-way comparison with the qualitative claims evaluated."""
    cfg = example_config()
    data = collect_data(cfg)
    report = compare(cfg, data)
    report.claims = evaluate_claims(report, cfg.build_plant().y2max)
    if out is not None:
        write_artifacts(out, cfg, data, report)
    return report
