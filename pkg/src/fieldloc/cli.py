"""Operator surface: config-driven dataset generation, training, evaluation.

One experiment run writes a self-describing output directory (config
snapshot, dataset hash, checkpoint, report CSVs) so any result can be
reproduced from the config file and seed alone.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import network, trainer
from .field_model import ElectrodeSystem, PhysicalConstants, Position, SourceCoincidence
from .optim import LbfgsConfig, NonFiniteGradient, NonFiniteLoss


class ConfigError(Exception):
    """Bad key, bad value, or malformed line in an experiment config file."""


def _parse_electrodes(text: str):
    """Parse 'q@(x,y,z); q@(x,y,z); ...' into ElectrodeSystem objects."""
    electrodes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "@" not in part:
            raise ConfigError(f"electrode '{part}' must look like 'charge@(x,y,z)'")
        charge_text, _, pos_text = part.partition("@")
        pos_text = pos_text.strip()
        if not (pos_text.startswith("(") and pos_text.endswith(")")):
            raise ConfigError(f"electrode position '{pos_text}' must be '(x,y,z)'")
        coords = pos_text[1:-1].split(",")
        if len(coords) != 3:
            raise ConfigError(f"electrode position '{pos_text}' needs 3 coordinates")
        try:
            charge = float(charge_text)
            x, y, z = (float(c) for c in coords)
        except ValueError as exc:
            raise ConfigError(f"electrode '{part}': {exc}") from None
        try:
            electrodes.append(ElectrodeSystem(Position(x, y, z), charge))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not electrodes:
        raise ConfigError("electrode list is empty")
    return electrodes


def _format_electrodes(electrodes) -> str:
    return "; ".join(
        f"{e.charge}@({e.source.x},{e.source.y},{e.source.z})" for e in electrodes
    )


# key -> (type, default, help). Defaults follow the reference environment and
# optimizer settings; the desk profile in configs/desk.cfg overrides the grid
# and budgets for quick runs.
CONFIG_SCHEMA = {
    "epsilon0": (float, 8.854e-12, "vacuum permittivity [F/m]"),
    "exclusion_radius": (float, 1e-6, "error radius around each source [m]"),
    "range_min": (float, 10.0, "grid lower bound per axis [m]"),
    "range_max": (float, 110.0, "grid upper bound per axis [m]"),
    "step": (float, 0.5, "grid spacing per axis [m]"),
    "electrodes": (str, "1@(0,0,0); -1@(0,0,100)", "semicolon-separated charge@(x,y,z) [C, m]"),
    "noise_intensity": (float, 0.0, "Gaussian noise fraction of per-component field std"),
    "holdout_fraction": (float, 0.1, "validation fraction of the dataset"),
    "hidden_layers": (int, 8, "hidden layer count"),
    "hidden_units": (int, 16, "units per hidden layer"),
    "adam_learning_rate": (float, 1e-4, "Adam learning rate"),
    "adam_beta1": (float, 0.9, "Adam first-moment decay"),
    "adam_beta2": (float, 0.999, "Adam second-moment decay"),
    "adam_epsilon": (float, 1e-8, "Adam denominator offset"),
    "batch_size": (int, 4096, "Adam minibatch size"),
    "max_epochs": (int, 50000, "Adam epoch budget"),
    "patience": (int, 500, "epochs without validation improvement before early stop"),
    "min_delta": (float, 1e-9, "minimum validation improvement that resets patience"),
    "lbfgs_history": (int, 50, "L-BFGS history size"),
    "lbfgs_step_scale": (float, 10.0, "L-BFGS initial line-search trial step"),
    "lbfgs_grad_tol": (float, 1e-12, "L-BFGS gradient tolerance (max-norm)"),
    "lbfgs_change_tol": (float, 1e-12, "L-BFGS loss-change tolerance"),
    "lbfgs_max_iter": (int, 500, "L-BFGS iteration budget"),
    "loss_weight_x": (float, 1.0, "x-axis loss weight"),
    "loss_weight_y": (float, 1.0, "y-axis loss weight"),
    "loss_weight_z": (float, 1.0, "z-axis loss weight"),
    "seed": (int, 0, "master seed for init/split/shuffle/noise"),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}
        merged.update(self.values)
        self.values = merged

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def grid(self) -> ds.GridSpec:
        try:
            return ds.GridSpec(self.range_min, self.range_max, self.step)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(self.epsilon0)

    @property
    def electrode_systems(self):
        return _parse_electrodes(self.electrodes)

    def train_config(self) -> trainer.TrainConfig:
        try:
            weights = trainer.LossWeights(
                self.loss_weight_x, self.loss_weight_y, self.loss_weight_z
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return trainer.TrainConfig(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            weights=weights,
            seed=self.seed,
            holdout_fraction=self.holdout_fraction,
            patience=self.patience,
            min_delta=self.min_delta,
            learning_rate=self.adam_learning_rate,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            epsilon=self.adam_epsilon,
            lbfgs=LbfgsConfig(
                history_size=self.lbfgs_history,
                step_scale=self.lbfgs_step_scale,
                grad_tol=self.lbfgs_grad_tol,
                change_tol=self.lbfgs_change_tol,
                max_iterations=self.lbfgs_max_iter,
            ),
            hidden_layers=self.hidden_layers,
            hidden_units=self.hidden_units,
        )

    def to_text(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in CONFIG_SCHEMA]
        return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    """Parse a key = value config file; unknown keys are rejected."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_number}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{line_number}: unknown key '{key}'")
        kind = CONFIG_SCHEMA[key][0]
        try:
            values[key] = raw if kind is str else kind(raw)
        except ValueError:
            raise ConfigError(
                f"{path}:{line_number}: key '{key}' expects {kind.__name__}, got '{raw}'"
            ) from None
    return ExperimentConfig(values)


def _config_key_help() -> str:
    lines = ["Config file keys (key = value, # comments allowed):", ""]
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        lines.append(f"  {key} ({kind.__name__}, default {default}): {help_text}")
    return "\n".join(lines)


def _apply_thread_cap(threads: int) -> None:
    if threads <= 0:
        return
    try:
        import threadpoolctl

        limiter = threadpoolctl.threadpool_limits(limits=threads)
        # Keep the limiter alive for the process lifetime.
        _apply_thread_cap._limiter = limiter
    except ImportError:
        click.echo("threadpoolctl not installed; --threads ignored", err=True)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        fn()
    except (ConfigError, ds.CsvSchemaError, ds.DegenerateComponent,
            ev.DomainTooSmall, SourceCoincidence, ValueError) as exc:
        _fail(2, str(exc))
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        _fail(4, str(exc))
    except OSError as exc:
        _fail(3, str(exc))


def _build_dataset(config: ExperimentConfig) -> ds.Dataset:
    data = ds.generate_grid(
        config.grid, config.electrode_systems, config.constants,
        r_min=config.exclusion_radius,
    )
    if config.noise_intensity > 0.0:
        data = ds.add_noise(data, config.noise_intensity, config.seed + 3)
    return data


@click.group(epilog=_config_key_help())
@click.option("--threads", type=int, default=0, show_default=True,
              help="Cap BLAS worker threads (0 = library default); results are unchanged.")
def main(threads: int):
    """Electric-field inversion localization experiments."""
    _apply_thread_cap(threads)


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--out", "-o", "out_path", required=True, type=click.Path(),
              help="Dataset CSV to write; a .stats sidecar is written next to it.")
@click.option("--dry-run", is_flag=True, help="Print the sample count and exit.")
def generate(config_path, out_path, dry_run):
    """Generate the position->field dataset CSV from a config file."""

    def run():
        config = load_config(config_path)
        grid = config.grid
        click.echo(f"grid [{grid.min}, {grid.max}] step {grid.step}: "
                   f"{grid.points_per_axis} points per axis, M = {grid.total_points}")
        if dry_run:
            return
        data = _build_dataset(config)
        magnitudes = np.linalg.norm(data.fields, axis=1)
        click.echo(f"|E| min/mean/max = {magnitudes.min():.6g} / "
                   f"{magnitudes.mean():.6g} / {magnitudes.max():.6g} V/m "
                   f"(noise intensity {config.noise_intensity})")
        ds.save_csv(data, out_path)
        ds.save_stats(ds.fit_norm_stats(data), str(out_path) + ".stats")
        click.echo(f"wrote {out_path} and {out_path}.stats")

    _guarded(run)


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--dataset", "dataset_path", type=click.Path(), default=None,
              help="Dataset CSV to train on (default: generate from the config).")
@click.option("--out", "-o", "out_dir", required=True, type=click.Path(),
              help="Experiment directory for checkpoint, report, and snapshot.")
@click.option("--max-epochs", type=int, default=None,
              help="Override the config's Adam epoch budget.")
def train(config_path, dataset_path, out_dir, max_epochs):
    """Train a model: Adam stage then full-batch L-BFGS."""

    def run():
        config = load_config(config_path)
        if max_epochs is not None:
            config.values["max_epochs"] = max_epochs
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if dataset_path is not None:
            data = ds.load_csv(dataset_path)
            (out / "dataset.sha256").write_text(
                f"{_sha256(dataset_path)}  {Path(dataset_path).name}\n", encoding="ascii")
        else:
            click.echo("no dataset given; generating from config")
            data = _build_dataset(config)
        (out / "config.cfg").write_text(config.to_text(), encoding="ascii")
        click.echo(f"training on {len(data)} samples "
                   f"(adam budget {config.max_epochs} epochs, batch {config.batch_size})")
        params, stats, report = trainer.train(config.train_config(), data)
        adam_rows = report.stage_boundary
        click.echo(f"adam stage: {adam_rows} epochs; "
                   f"lbfgs stage: {len(report) - adam_rows - 1} iterations "
                   f"({report.termination}, {report.wall_time:.1f}s)")
        click.echo(f"final losses: x={report.loss_x[-1]:.3e} y={report.loss_y[-1]:.3e} "
                   f"z={report.loss_z[-1]:.3e} total={report.loss_total[-1]:.3e}")
        network.save_checkpoint(out / "model.ckpt", params, stats)
        report.save_csv(out / "train_report.csv")
        click.echo(f"wrote {out / 'model.ckpt'} and {out / 'train_report.csv'}")

    _guarded(run)


def _evaluate_model(params, stats, config, kind, n_points, noise, seed):
    if kind in ("spiral", "circle", "random"):
        points = ev.make_trajectory(kind, n_points, seed, config.grid)
        name = kind
    else:
        points = ds.load_csv(kind).positions
        name = Path(kind).stem
    return ev.evaluate(
        params, stats, points, config.electrode_systems, config.constants,
        noise_intensity=noise, seed=seed + 4, name=name,
    )


@main.command("eval")
@click.argument("model_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Config file providing electrodes, constants, and grid.")
@click.option("--trajectory", default="random", show_default=True,
              help="spiral | circle | random | path to a dataset CSV of true points.")
@click.option("--points", "n_points", type=int, default=200, show_default=True,
              help="Point count for synthetic trajectories.")
@click.option("--noise", type=float, default=0.0, show_default=True,
              help="Measurement-noise intensity applied to synthesized fields.")
@click.option("--sweep-noise", default=None,
              help="Comma-separated intensities; evaluate this model at each one.")
@click.option("--sweep-step", default=None,
              help="Comma-separated grid steps; retrain per step (slow) and tabulate.")
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
def eval_cmd(model_path, config_path, trajectory, n_points, noise,
             sweep_noise, sweep_step, out_dir):
    """Evaluate a trained model on a test trajectory."""

    def run():
        config = load_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if sweep_step is not None:
            steps = _parse_float_list(sweep_step, "sweep-step")
            _run_step_sweep(config, steps, trajectory, n_points, out)
            return
        params, stats = network.load_checkpoint(model_path)
        if sweep_noise is not None:
            intensities = _parse_float_list(sweep_noise, "sweep-noise")
            rows = []
            for intensity in intensities:
                metrics, _ = _evaluate_model(
                    params, stats, config, trajectory, n_points, intensity, config.seed)
                rows.append((intensity, metrics))
                click.echo(f"noise {intensity}: mae x/y/z = "
                           f"{metrics.mae_x:.3f}/{metrics.mae_y:.3f}/{metrics.mae_z:.3f} m")
            _write_sweep_csv(out / "noise_sweep.csv", "noise", rows)
            click.echo(f"wrote {out / 'noise_sweep.csv'}")
            return
        metrics, traj = _evaluate_model(
            params, stats, config, trajectory, n_points, noise, config.seed)
        ev.save_trajectory_csv(traj, out / f"trajectory_{traj.name}.csv")
        ev.save_metrics_text(metrics, out / "metrics.txt")
        ev.save_metrics_csv(metrics, out / "metrics.csv")
        click.echo(f"{traj.name}: mae x/y/z = {metrics.mae_x:.3f}/{metrics.mae_y:.3f}/"
                   f"{metrics.mae_z:.3f} m, mean euclidean {metrics.mean_euclidean:.3f} m, "
                   f"location error {metrics.percent_error:.2f}%")
        click.echo(f"wrote metrics and trajectory CSV under {out}")

    _guarded(run)


def _parse_float_list(text: str, what: str):
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--{what} expects comma-separated numbers, got '{text}'") from None
    if not values:
        raise ConfigError(f"--{what} list is empty")
    return values


def _write_sweep_csv(path, label, rows):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{label},mae_x,mae_y,mae_z\n")
        for value, metrics in rows:
            fh.write(f"{value!r},{metrics.mae_x!r},{metrics.mae_y!r},{metrics.mae_z!r}\n")


def _run_step_sweep(config, steps, trajectory, n_points, out: Path):
    rows = []
    for step in steps:
        sub = ExperimentConfig(dict(config.values))
        sub.values["step"] = step
        click.echo(f"step {step}: generating and training "
                   f"({sub.grid.total_points} samples)")
        data = _build_dataset(sub)
        params, stats, _ = trainer.train(sub.train_config(), data)
        metrics, _ = _evaluate_model(
            params, stats, sub, trajectory, n_points, 0.0, sub.seed)
        click.echo(f"step {step}: mae x/y/z = "
                   f"{metrics.mae_x:.3f}/{metrics.mae_y:.3f}/{metrics.mae_z:.3f} m")
        rows.append((step, metrics))
    _write_sweep_csv(out / "step_sweep.csv", "step", rows)
    click.echo(f"wrote {out / 'step_sweep.csv'}")


def _run_noise_retrain_sweep(config, intensities, trajectory, n_points, out: Path):
    rows = []
    base = ds.generate_grid(config.grid, config.electrode_systems, config.constants,
                            r_min=config.exclusion_radius)
    for intensity in intensities:
        data = ds.add_noise(base, intensity, config.seed + 3) if intensity > 0 else base
        click.echo(f"noise {intensity}: training on {len(data)} samples")
        params, stats, _ = trainer.train(config.train_config(), data)
        metrics, _ = _evaluate_model(
            params, stats, config, trajectory, n_points, 0.0, config.seed)
        click.echo(f"noise {intensity}: mae x/y/z = "
                   f"{metrics.mae_x:.3f}/{metrics.mae_y:.3f}/{metrics.mae_z:.3f} m")
        rows.append((intensity, metrics))
    _write_sweep_csv(out / "noise_sweep.csv", "noise", rows)
    click.echo(f"wrote {out / 'noise_sweep.csv'}")


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--param", type=click.Choice(["noise", "step"]), required=True,
              help="Which knob to sweep; each value retrains from scratch.")
@click.option("--values", required=True, help="Comma-separated sweep values.")
@click.option("--trajectory", default="random", show_default=True)
@click.option("--points", "n_points", type=int, default=200, show_default=True)
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
def sweep(config_path, param, values, trajectory, n_points, out_dir):
    """Retrain across noise intensities or grid steps and tabulate accuracy."""

    def run():
        config = load_config(config_path)
        sweep_values = _parse_float_list(values, "values")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(config.to_text(), encoding="ascii")
        if param == "step":
            _run_step_sweep(config, sweep_values, trajectory, n_points, out)
        else:
            _run_noise_retrain_sweep(config, sweep_values, trajectory, n_points, out)

    _guarded(run)


if __name__ == "__main__":
    main()
