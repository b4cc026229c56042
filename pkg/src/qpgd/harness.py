"""End-to-end orchestration: ground-truth training, baseline and constrained
runs, evaluation, diagnostics hand-off, and every file format.

A run is fully determined by its RunConfig plus the seeds derived from the
single master seed; reductions are fixed-order, so two runs of the same
config produce byte-identical artifacts.

History CSV semantics: row k (k < epochs) holds the losses evaluated at the
parameters *before* step k; a final row at epoch == epochs holds the
terminal state.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import capacitor as cap
from . import diagnostics as diag
from .autodiff import ConfigurationError, MlpSpec, NetworkField, init_params, param_count
from .optimizer import (
    AdamState,
    LrSchedule,
    NonFiniteError,
    QpgdConfig,
    adam_step,
    lr_at,
    qpgd_epoch,
)

CHECKPOINT_VERSION = "qpgd-checkpoint v1"

HISTORY_COLUMNS = ("epoch", "f", "g", "alpha", "gamma", "l_data", "l_pde", "l_bc0", "l_bcv")


class CheckpointError(ValueError):
    code = "checkpoint-error"


class CheckpointVersionError(CheckpointError):
    code = "version-mismatch"


class CheckpointDigestError(CheckpointError):
    code = "digest-mismatch"


class CheckpointParseError(CheckpointError):
    code = "malformed-line"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_CONFIG_SECTIONS = {
    "run": ("mode", "seed", "epochs", "out_dir"),
    "network": ("hidden_widths", "activation"),
    "optimizer": ("gamma0", "halving_interval", "use_adam", "adam_beta1", "adam_beta2",
                  "adam_eps", "c", "eps_alpha", "alpha_clip"),
    "points": ("n_pde", "n_bc0", "n_bcv", "n_meas"),
    "constraint": ("p", "z", "delta"),
    "pretrain": ("pretrain", "pretrain_threshold", "pretrain_cap"),
    "truth": ("v0_true",),
    "paths": ("truth_checkpoint", "measurement_points_file"),
    "metrics": ("grid_resolution",),
}


@dataclass
class RunConfig:
    mode: str = "qpgd"  # truth | naive | qpgd
    seed: int = 0
    epochs: int = 4000
    out_dir: str = "runs/out"
    hidden_widths: tuple = (32, 32, 32)
    activation: str = "gelu"
    gamma0: float = 4e-3
    halving_interval: int = 6667
    use_adam: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    c: float = 1.0
    eps_alpha: float = 1e-12
    alpha_clip: Optional[float] = None
    n_pde: int = 2000
    n_bc0: int = 100
    n_bcv: int = 50
    n_meas: int = 4
    p: float = 2.0
    z: float = 1.0
    delta: float = 0.1
    pretrain: bool = True
    pretrain_threshold: Optional[float] = None  # defaults to delta^2
    pretrain_cap: int = 2000
    v0_true: float = 1.0
    truth_checkpoint: Optional[str] = None
    measurement_points_file: Optional[str] = None
    grid_resolution: int = 200

    def __post_init__(self):
        if self.mode not in ("truth", "naive", "qpgd"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(2, tuple(self.hidden_widths), 1, self.activation)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.gamma0, self.halving_interval)

    @property
    def qpgd(self) -> QpgdConfig:
        return QpgdConfig(
            c=self.c, eps_alpha=self.eps_alpha, alpha_clip=self.alpha_clip,
            use_adam=self.use_adam, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
        )

    @property
    def constraint(self) -> cap.ConstraintConfig:
        return cap.ConstraintConfig(p=self.p, z=self.z, delta=self.delta)

    @property
    def data_threshold(self) -> float:
        return self.pretrain_threshold if self.pretrain_threshold is not None else self.delta**2


def desk_config(**overrides) -> RunConfig:
    """Laptop-scale preset: 3x32 network, 2000 interior points, 4000 epochs,
    on the same learning-rate curve as full scale (gamma0 = 4e-3, halving
    every 6667 epochs, so no halving occurs within a desk run)."""
    return replace(RunConfig(), **overrides)


def full_config(**overrides) -> RunConfig:
    """Full-scale preset: 4x64 network, 20000 interior points, 40000 epochs."""
    base = RunConfig(
        hidden_widths=(64, 64, 64, 64),
        epochs=40_000,
        halving_interval=6_667,
        n_pde=20_000,
        n_bc0=300,
        n_bcv=100,
    )
    return replace(base, **overrides)


PRESETS = {"desk": desk_config, "full": full_config}


def _format_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, keys in _CONFIG_SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
        out.write("\n")
    return out.getvalue()


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    if key in ("mode", "activation", "out_dir", "truth_checkpoint",
               "measurement_points_file"):
        return raw
    if key == "hidden_widths":
        return tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)
    if key in ("seed", "epochs", "halving_interval", "n_pde", "n_bc0", "n_bcv",
               "n_meas", "pretrain_cap", "grid_resolution"):
        return int(raw)
    if key in ("use_adam", "pretrain"):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"boolean key {key} got {raw!r}")
    if key == "p" and raw.lower() in ("inf", "infinity"):
        return math.inf
    return float(raw)


def config_from_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    values = {}
    for section, keys in _CONFIG_SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser[section]:
            if key not in keys:
                raise ConfigurationError(f"unknown config key [{section}] {key}")
            values[key] = _parse_value(key, parser[section][key])
    return replace(base if base is not None else RunConfig(), **values)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    return config_from_text(Path(path).read_text(), base=base)


def save_config(path, cfg: RunConfig):
    Path(path).write_text(config_to_text(cfg))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:12]


def derive_seeds(master: int) -> dict:
    """Independent child seeds for each random stream of a run."""
    state = np.random.SeedSequence(master).generate_state(5, dtype=np.uint64)
    names = ("init", "interior", "boundary", "meas_points", "noise")
    return {name: int(s) for name, s in zip(names, state)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _spec_line(spec: MlpSpec) -> str:
    hidden = ",".join(str(w) for w in spec.hidden_widths)
    return (f"input_dim={spec.input_dim} hidden={hidden} "
            f"output_dim={spec.output_dim} activation={spec.activation}")


def _parse_spec_line(line: str) -> MlpSpec:
    try:
        kv = dict(tok.split("=", 1) for tok in line.split())
        return MlpSpec(
            int(kv["input_dim"]),
            tuple(int(w) for w in kv["hidden"].split(",")),
            int(kv["output_dim"]),
            kv["activation"],
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointParseError(f"bad spec header: {line!r}") from exc


def save_checkpoint(path, params: np.ndarray, spec: MlpSpec, digest: str, seed: int):
    """Plain text, one parameter per line at 17 significant digits (lossless
    for float64); v_hat is recoverable as the final entry."""
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_VERSION + "\n")
        fh.write(f"# spec: {_spec_line(spec)}\n")
        fh.write(f"# digest: {digest}\n")
        fh.write(f"# seed: {seed}\n")
        for v in np.asarray(params, dtype=float):
            fh.write(f"{v:.17g}\n")


def load_checkpoint(path, expected_digest: Optional[str] = None):
    """Returns (params, spec, header dict).  Raises distinct errors for a
    version mismatch, a digest mismatch, or a malformed line."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"expected header {CHECKPOINT_VERSION!r}, got {lines[0]!r}" if lines
            else "empty checkpoint file"
        )
    header = {}
    body_start = 1
    for i, line in enumerate(lines[1:], start=1):
        if not line.startswith("#"):
            body_start = i
            break
        key, _, value = line[1:].partition(":")
        header[key.strip()] = value.strip()
    else:
        body_start = len(lines)
    if "spec" not in header:
        raise CheckpointParseError("missing spec header line")
    spec = _parse_spec_line(header["spec"])
    if expected_digest is not None and header.get("digest") != expected_digest:
        raise CheckpointDigestError(
            f"checkpoint digest {header.get('digest')!r} != expected {expected_digest!r}"
        )
    values = []
    for i, line in enumerate(lines[body_start:], start=body_start):
        if not line.strip():
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise CheckpointParseError(f"malformed parameter at line {i + 1}: {line!r}") from exc
    params = np.asarray(values, dtype=float)
    if params.size != param_count(spec):
        raise CheckpointParseError(
            f"checkpoint has {params.size} parameters, spec needs {param_count(spec)}"
        )
    return params, spec, header


# ---------------------------------------------------------------------------
# History rows
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    f: float
    g: float
    alpha: float
    gamma: float
    l_data: float
    l_pde: float
    l_bc0: float
    l_bcv: float


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in rows:
            fh.write(
                f"{r.epoch},{r.f!r},{r.g!r},{r.alpha!r},{r.gamma!r},"
                f"{r.l_data!r},{r.l_pde!r},{r.l_bc0!r},{r.l_bcv!r}\n"
            )


# ---------------------------------------------------------------------------
# Run assembly
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint: Path
    history: Path
    metrics_file: Optional[Path]
    params: np.ndarray
    rows: list
    report: dict
    warnings: list


def _prepare_dirs(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# Probe positions are a fixed property of the experiment (like physical
# sensors); only the noise realization varies with the run seed.
PROBE_WALK_SEED = 0


def _measurement_points(cfg: RunConfig, geom, seeds) -> np.ndarray:
    if cfg.measurement_points_file:
        _, _, pts, _, _ = cap.load_points(cfg.measurement_points_file)
        if pts.shape[0] != cfg.n_meas:
            raise ConfigurationError(
                f"measurement file has {pts.shape[0]} points, config says {cfg.n_meas}"
            )
        return pts
    nominals = cap.DEFAULT_MEASUREMENT_NOMINALS
    if cfg.n_meas != nominals.shape[0]:
        # fall back to interior sampling for non-default counts
        return cap.sample_interior(geom, cfg.n_meas, seeds["meas_points"])
    return cap.default_measurement_points(geom, PROBE_WALK_SEED)


def build_problem(cfg: RunConfig, truth_field=None):
    """Sample and freeze every point set, then bind the training losses."""
    geom = cap.capacitor_geometry()
    seeds = derive_seeds(cfg.seed)
    interior = cap.sample_interior(geom, cfg.n_pde, seeds["interior"])
    grounded, top = cap.sample_boundary(geom, cfg.n_bc0, cfg.n_bcv, seeds["boundary"])
    if cfg.mode == "truth":
        points = cap.PointSets(interior, grounded, top, np.empty((0, 2)))
        problem = cap.CapacitorProblem(cfg.spec, points, None, cfg.constraint,
                                       fixed_v0=cfg.v0_true)
        return geom, seeds, points, None, problem
    if truth_field is None:
        raise ConfigurationError("inverse-problem runs need a truth checkpoint for labels")
    meas_pts = _measurement_points(cfg, geom, seeds)
    measurements = cap.make_measurements(truth_field, meas_pts, cfg.delta, seeds["noise"])
    points = cap.PointSets(interior, grounded, top, meas_pts)
    problem = cap.CapacitorProblem(cfg.spec, points, measurements, cfg.constraint)
    return geom, seeds, points, measurements, problem


def _save_run_inputs(out: Path, cfg: RunConfig, seeds, points, measurements):
    cap.save_points(out / "interior.txt", "interior", seeds["interior"], points.interior)
    cap.save_points(out / "grounded.txt", "grounded", seeds["boundary"], points.grounded)
    cap.save_points(out / "top.txt", "top", seeds["boundary"], points.top)
    if measurements is not None:
        cap.save_points(
            out / "measurements.txt", "measurements", seeds["noise"],
            measurements.points, labels=measurements.labels,
            deltas=np.full(len(measurements.labels), measurements.delta),
        )
    save_config(out / "config.ini", cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_truth(cfg: RunConfig) -> RunArtifacts:
    """Forward problem: train with the top-plate voltage fixed at its known
    value; the result serves as the ground-truth field for inverse runs."""
    cfg = replace(cfg, mode="truth")
    out = _prepare_dirs(cfg)
    geom, seeds, points, _, problem = build_problem(cfg)
    digest = config_digest(cfg)
    params = init_params(cfg.spec, seeds["init"])
    state = AdamState.zeros(params.size) if cfg.use_adam else None
    rows = []
    warnings = []
    schedule = cfg.schedule
    for epoch in range(cfg.epochs):
        f_val, grad, parts = problem.objective_with_grad(params)
        if not (np.isfinite(f_val) and np.all(np.isfinite(grad))):
            raise NonFiniteError("truth objective", epoch)
        gamma = lr_at(schedule, epoch)
        rows.append(HistoryRow(epoch, f_val, math.nan, 0.0, gamma, math.nan,
                               parts["l_pde"], parts["l_bc0"], parts["l_bcv"]))
        if cfg.use_adam:
            state, params = adam_step(state, params, grad, gamma, cfg.qpgd)
        else:
            params = params - gamma * grad
    f_val, _, parts = problem.objective_with_grad(params)
    rows.append(HistoryRow(cfg.epochs, f_val, math.nan, 0.0, lr_at(schedule, cfg.epochs),
                           math.nan, parts["l_pde"], parts["l_bc0"], parts["l_bcv"]))

    field = NetworkField(params, cfg.spec)
    rep = cap.metrics(field, field, geom, cfg.grid_resolution)
    xs = np.linspace(geom.x_min, geom.x_max, 400)
    side_y = np.linspace(*geom.side_span("left"), 200)
    grounded_dense = np.concatenate([
        np.abs(field.eval(np.full(200, geom.x_min), side_y)),
        np.abs(field.eval(np.full(200, geom.x_max), side_y)),
        np.abs(field.eval(xs, cap.f_lower(xs))),
    ])
    top_dense = np.abs(field.eval(xs, cap.f_upper(xs)) - cfg.v0_true)
    report = {
        "mode": "truth",
        "v0_true": cfg.v0_true,
        "avg_abs_laplacian": rep.avg_abs_laplacian,
        "mean_boundary_error_grounded": float(np.mean(grounded_dense)),
        "mean_boundary_error_top": float(np.mean(top_dense)),
        "final_f": f_val,
    }
    _save_run_inputs(out, cfg, seeds, points, None)
    save_checkpoint(out / "checkpoint.txt", params, cfg.spec, digest, cfg.seed)
    write_history(out / "loss_history.csv", rows)
    _write_report(out / "metrics.txt", report)
    cap.export_grid(out / "grid.csv", field, field, geom, cfg.grid_resolution)
    return RunArtifacts(out, out / "checkpoint.txt", out / "loss_history.csv",
                        out / "metrics.txt", params, rows, report, warnings)


def _naive_phase(problem, params, state, cfg, rows, start_epoch, end_epoch,
                 stop_threshold=None):
    """Adam steps on the single-loss baseline objective.

    Returns (params, state, epoch_reached, fired) where fired is True when
    the data term dropped to the threshold before the cap."""
    schedule = cfg.schedule
    epoch = start_epoch
    while epoch < end_epoch:
        naive_val, grad, parts = problem.naive_with_grad(params)
        if not (np.isfinite(naive_val) and np.all(np.isfinite(grad))):
            raise NonFiniteError("baseline loss", epoch)
        l_data_sq = parts["l_data_sq"]
        f_val = parts["l_pde"] + parts["l_bc0"] + parts["l_bcv"]
        g_val = l_data_sq - problem.constraint.bound_sq
        gamma = lr_at(schedule, epoch)
        if stop_threshold is not None and l_data_sq <= stop_threshold:
            return params, state, epoch, True
        rows.append(HistoryRow(epoch, f_val, g_val, 0.0, gamma,
                               math.sqrt(max(l_data_sq, 0.0)), parts["l_pde"],
                               parts["l_bc0"], parts["l_bcv"]))
        if cfg.use_adam:
            state, params = adam_step(state, params, grad, gamma, cfg.qpgd)
        else:
            params = params - gamma * grad
        epoch += 1
    return params, state, epoch, False


def cmd_pretrain(cfg: RunConfig, params: Optional[np.ndarray] = None):
    """Baseline-loss steps until the squared data term reaches the threshold
    (default: the noise variance), capped; returns (params, state, epoch
    fired, fired flag, rows)."""
    truth_field = _load_truth_field(cfg)
    _, seeds, _, _, problem = build_problem(cfg, truth_field)
    if params is None:
        params = init_params(cfg.spec, seeds["init"])
    state = AdamState.zeros(params.size) if cfg.use_adam else None
    rows = []
    cap_epochs = min(cfg.pretrain_cap, cfg.epochs)
    params, state, epoch, fired = _naive_phase(
        problem, params, state, cfg, rows, 0, cap_epochs,
        stop_threshold=cfg.data_threshold,
    )
    if not fired:
        print(
            f"warning: pretraining cap {cap_epochs} reached with data term above "
            f"threshold {cfg.data_threshold!r}; continuing anyway",
            file=sys.stderr,
        )
    return params, state, epoch, fired, rows


def _load_truth_field(cfg: RunConfig) -> NetworkField:
    if not cfg.truth_checkpoint:
        raise ConfigurationError("config has no truth_checkpoint path")
    params, spec, _ = load_checkpoint(cfg.truth_checkpoint)
    return NetworkField(params, spec)


def cmd_train(cfg: RunConfig) -> RunArtifacts:
    """Full inverse-problem run (baseline or constrained mode)."""
    if cfg.mode not in ("naive", "qpgd"):
        raise ConfigurationError("cmd_train handles modes naive and qpgd")
    out = _prepare_dirs(cfg)
    truth_field = _load_truth_field(cfg)
    geom, seeds, points, measurements, problem = build_problem(cfg, truth_field)
    digest = config_digest(cfg)
    params = init_params(cfg.spec, seeds["init"])
    state = AdamState.zeros(params.size) if cfg.use_adam else None
    schedule = cfg.schedule
    rows = []
    warnings = []
    report = {"mode": cfg.mode, "seed": cfg.seed, "digest": digest}

    try:
        if cfg.mode == "naive":
            params, state, _, _ = _naive_phase(problem, params, state, cfg, rows,
                                               0, cfg.epochs)
        else:
            start = 0
            if cfg.pretrain:
                cap_epochs = min(cfg.pretrain_cap, cfg.epochs)
                params, state, start, fired, pre_rows = _qpgd_pretrain_phase(
                    problem, params, state, cfg, cap_epochs
                )
                rows.extend(pre_rows)
                report["pretrain_epochs"] = start
                report["pretrain_fired"] = fired
                if not fired:
                    warnings.append(
                        f"pretraining cap {cap_epochs} reached above threshold; "
                        "constrained phase starts from an infeasible point"
                    )
            parts_box = {}

            def f_eval(p):
                v, grad, parts = problem.objective_with_grad(p)
                parts_box.update(parts)
                return v, grad

            def g_eval(p):
                v, grad, l_data = problem.constraint_with_grad(p)
                parts_box["l_data"] = l_data
                return v, grad

            for epoch in range(start, cfg.epochs):
                params_new, state, rec = qpgd_epoch(
                    params, f_eval, g_eval, cfg.qpgd, schedule, state, epoch
                )
                rows.append(HistoryRow(epoch, rec.f, rec.g, rec.alpha, rec.gamma,
                                       parts_box["l_data"], parts_box["l_pde"],
                                       parts_box["l_bc0"], parts_box["l_bcv"]))
                params = params_new
    except NonFiniteError as exc:
        # keep the last good parameters on disk, then surface the failure
        save_checkpoint(out / "checkpoint_last_good.txt", params, cfg.spec, digest, cfg.seed)
        write_history(out / "loss_history.csv", rows)
        raise

    rows.append(_terminal_row(problem, params, cfg, schedule))

    _save_run_inputs(out, cfg, seeds, points, measurements)
    save_checkpoint(out / "checkpoint.txt", params, cfg.spec, digest, cfg.seed)
    write_history(out / "loss_history.csv", rows)

    field = NetworkField(params, cfg.spec)
    rep = cap.metrics(field, truth_field, geom, cfg.grid_resolution)
    report.update(
        v_hat=rep.v_hat,
        avg_abs_error_interior=rep.avg_abs_error_interior,
        avg_abs_laplacian=rep.avg_abs_laplacian,
        terminal_f=rows[-1].f,
        terminal_g=rows[-1].g,
        terminal_l_data=rows[-1].l_data,
    )
    _write_report(out / "metrics.txt", report)
    cap.export_grid(out / "grid.csv", field, truth_field, geom, cfg.grid_resolution)
    return RunArtifacts(out, out / "checkpoint.txt", out / "loss_history.csv",
                        out / "metrics.txt", params, rows, report, warnings)


def _qpgd_pretrain_phase(problem, params, state, cfg, cap_epochs):
    rows = []
    params, state, epoch, fired = _naive_phase(
        problem, params, state, cfg, rows, 0, cap_epochs,
        stop_threshold=cfg.data_threshold,
    )
    return params, state, epoch, fired, rows


def _terminal_row(problem, params, cfg, schedule) -> HistoryRow:
    f_val, _, parts = problem.objective_with_grad(params)
    g_val, _, l_data = problem.constraint_with_grad(params)
    return HistoryRow(cfg.epochs, f_val, g_val, 0.0, lr_at(schedule, cfg.epochs),
                      l_data, parts["l_pde"], parts["l_bc0"], parts["l_bcv"])


def cmd_evaluate(checkpoint_path, truth_checkpoint_path, grid_resolution: int = 200,
                 out_dir: Optional[str] = None,
                 expected_digest: Optional[str] = None) -> dict:
    """Metrics of a trained checkpoint against the truth field: estimated
    voltage, interior error, mean absolute Laplacian."""
    params, spec, header = load_checkpoint(checkpoint_path)
    if expected_digest is not None and header.get("digest") != expected_digest:
        print(
            f"warning: checkpoint digest {header.get('digest')!r} does not match "
            f"expected {expected_digest!r}; results may come from another config",
            file=sys.stderr,
        )
    t_params, t_spec, _ = load_checkpoint(truth_checkpoint_path)
    geom = cap.capacitor_geometry()
    field = NetworkField(params, spec)
    truth = NetworkField(t_params, t_spec)
    rep = cap.metrics(field, truth, geom, grid_resolution)
    report = {
        "checkpoint": str(checkpoint_path),
        "v_hat": rep.v_hat,
        "avg_abs_error_interior": rep.avg_abs_error_interior,
        "avg_abs_laplacian": rep.avg_abs_laplacian,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out / "metrics.txt", report)
        cap.export_grid(out / "grid.csv", field, truth, geom, grid_resolution)
    return report


def cmd_sample(cfg: RunConfig, out_dir: Optional[str] = None) -> Path:
    """Emit the frozen point sets (and labeled measurements when a truth
    checkpoint is configured) without training."""
    out = Path(out_dir) if out_dir else _prepare_dirs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    truth_field = _load_truth_field(cfg) if cfg.truth_checkpoint else None
    geom = cap.capacitor_geometry()
    seeds = derive_seeds(cfg.seed)
    interior = cap.sample_interior(geom, cfg.n_pde, seeds["interior"])
    grounded, top = cap.sample_boundary(geom, cfg.n_bc0, cfg.n_bcv, seeds["boundary"])
    meas_pts = _measurement_points(cfg, geom, seeds)
    cap.save_points(out / "interior.txt", "interior", seeds["interior"], interior)
    cap.save_points(out / "grounded.txt", "grounded", seeds["boundary"], grounded)
    cap.save_points(out / "top.txt", "top", seeds["boundary"], top)
    if truth_field is not None:
        m = cap.make_measurements(truth_field, meas_pts, cfg.delta, seeds["noise"])
        cap.save_points(out / "measurements.txt", "measurements", seeds["noise"],
                        m.points, labels=m.labels,
                        deltas=np.full(len(m.labels), m.delta))
    else:
        cap.save_points(out / "measurement_points.txt", "measurement_points",
                        seeds["meas_points"], meas_pts)
    return out


def cmd_diagnose(history_csv, out_path=None, c: float = 1.0, beta: float = 10.0,
                 sgd_mode: bool = False) -> list:
    """Run the theory checks over a recorded loss history.

    Network runs use Adam, so by default the report is advisory: it is
    always produced and never fails the command."""
    traj = diag.read_trajectory_csv(history_csv, sgd_mode=sgd_mode)
    lines = diag.diagnose_trajectory(traj, c=c, beta=beta)
    if out_path is not None:
        diag.write_report(out_path, lines)
    return lines


def cmd_toy(out_path=None, gamma: float = 1e-3, c: float = 1.0) -> diag.ToySuiteReport:
    """Run the toy verification suite (analytic optima, descent, invariance,
    attraction scaling)."""
    report = diag.run_toy_suite(gamma=gamma, c=c)
    lines = list(report.lines)
    lines.append(f"suite: {'PASS' if report.ok else 'FAIL'}")
    if out_path is not None:
        diag.write_report(out_path, lines)
    return report


def _write_report(path, report: dict):
    with open(path, "w") as fh:
        for key, value in report.items():
            fh.write(f"{key} = {value!r}\n")


def _parse_report_value(s: str):
    s = s.strip()
    if s in ("True", "False"):
        return s == "True"
    if s == "None":
        return None
    if len(s) >= 2 and s[0] == s[-1] == "'":
        return s[1:-1]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)  # also handles 'nan' and 'inf'
    except ValueError:
        return s


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key] = _parse_report_value(value)
    return out
