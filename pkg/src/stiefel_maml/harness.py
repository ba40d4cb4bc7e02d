"""Experiment orchestration: training loop, held-out evaluation, CSV output.

A run writes three files into its output directory:

``config.txt``       every effective setting as ``key=value`` (re-loadable)
``metrics.csv``      one row per evaluation point
``checkpoint.json``  final meta-parameters
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .kernel import KernelParams
from .meta import (
    EVAL_STREAM,
    METHODS,
    TRAIN_STREAM,
    MetaConfig,
    compute_ci95,
    evaluate,
    meta_step_info,
    task_seed,
)
from .model import MLP, ModelConfig, save_params
from .tasks import GaussianFamily, SinusoidFamily, load_folder_dataset

__all__ = [
    "ConfigError", "RunConfig", "RunResult", "CompareResult", "compute_ci95",
    "load_config_file", "make_family", "parse_scenario", "run_experiment",
    "compare_methods", "metrics_header",
]

GAUSSIAN_PRESETS = {
    "gaussian": {},
    "gaussian-A": {},
    "gaussian-B": {"scale": 1.5, "spread": 0.25},
}


class ConfigError(ValueError):
    pass


def _parse_hidden(value):
    if isinstance(value, str):
        try:
            value = tuple(int(v) for v in value.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {value!r}") from None
    return tuple(int(v) for v in value)


@dataclass(frozen=True)
class RunConfig:
    method: str = "smaml"
    order: str | None = None
    ways: int = 5
    shots: int = 1
    query: int = 15
    inner_steps: int = 5
    alpha: float = 0.01
    beta: float = 0.001
    task_batch: int = 4
    episodes: int = 2000
    eval_every: int = 500
    eval_tasks: int = 200
    seed: int = 0
    dataset: str = "gaussian"
    split: str = "0.5"
    scenario: str | None = None
    kernel_mu: float = 0.0
    kernel_lambda: float = 1.0
    hidden: tuple = (128,)
    activation: str = "tanh"
    graph_budget: int = 128
    out: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "hidden", _parse_hidden(self.hidden))
        if self.order == "":
            object.__setattr__(self, "order", None)
        if self.scenario == "":
            object.__setattr__(self, "scenario", None)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_tasks < 2:
            raise ConfigError("eval_tasks must be >= 2 for confidence intervals")
        if self.ways < 2 or self.shots < 1 or self.query < 1:
            raise ConfigError("need ways >= 2, shots >= 1, query >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        try:
            self.meta_config()
            ModelConfig(1, self.hidden, 2, activation=self.activation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def meta_config(self):
        return MetaConfig(
            alpha=self.alpha,
            beta=self.beta,
            inner_steps=self.inner_steps,
            task_batch=self.task_batch,
            method=self.method,
            order=self.order,
            seed=self.seed,
            kernel=KernelParams(lam=self.kernel_lambda, mu=self.kernel_mu),
            graph_budget=self.graph_budget,
        )

    def to_lines(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "order" and v is None:
                v = self.meta_config().order
            if v is None:
                v = ""
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return lines

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values (config file or flags); unknown keys fail."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for raw_key, value in mapping.items():
            key = raw_key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {raw_key!r}")
            kwargs[key] = _coerce(key, types[key], value)
        return cls(**kwargs)


def _coerce(key, annotation, value):
    if not isinstance(value, str):
        return value
    try:
        if annotation == "int":
            return int(value)
        if annotation == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def load_config_file(path):
    """Parse a flat ``key=value`` file (``#`` starts a comment)."""
    text = Path(path).read_text()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# --------------------------------------------------------------------------
# families


def make_family(spec, split="0.5"):
    """Task family from a dataset spec: a Gaussian preset, ``sinusoid`` or ``folder:PATH``."""
    if spec in GAUSSIAN_PRESETS:
        return GaussianFamily(name=spec, **GAUSSIAN_PRESETS[spec])
    if spec == "sinusoid":
        return SinusoidFamily()
    if spec.startswith("folder:"):
        path = spec[len("folder:"):]
        try:
            split_spec = float(split)
        except ValueError:
            split_spec = split
        return load_folder_dataset(path, split_spec)
    raise ConfigError(
        f"unknown dataset {spec!r}; use {', '.join(GAUSSIAN_PRESETS)}, sinusoid or folder:PATH"
    )


def parse_scenario(text):
    """Split ``TRAIN:TEST`` into two dataset specs (``folder:PATH`` allowed)."""
    parts = text.split(":")
    specs = []
    i = 0
    while i < len(parts):
        if parts[i] == "folder" and i + 1 < len(parts):
            specs.append("folder:" + parts[i + 1])
            i += 2
        else:
            specs.append(parts[i])
            i += 1
    if len(specs) != 2 or not all(specs):
        raise ConfigError(f"scenario must look like TRAIN:TEST, got {text!r}")
    return specs[0], specs[1]


def _families(config):
    if config.scenario:
        train_spec, test_spec = parse_scenario(config.scenario)
    else:
        train_spec = test_spec = config.dataset
    train = make_family(train_spec, config.split)
    test = train if test_spec == train_spec else make_family(test_spec, config.split)
    if train.input_dim != test.input_dim:
        raise ConfigError(
            f"scenario families disagree on input size: {train.input_dim} vs {test.input_dim}"
        )
    if (train.kind == "sinusoid") != (test.kind == "sinusoid"):
        raise ConfigError("scenario mixes regression and classification families")
    label = f"{train_spec}->{test_spec}" if config.scenario else train_spec
    return train, test, label


def _model_config(config, family):
    if family.kind == "sinusoid":
        return ModelConfig(1, config.hidden, 1, config.activation, "mean-squared-error")
    return ModelConfig(family.input_dim, config.hidden, config.ways, config.activation)


# --------------------------------------------------------------------------
# runs


def metrics_header(inner_steps):
    return (
        ["iter", "scenario", "method", "metric", "meta_loss", "query_acc_mean",
         "query_acc_ci95", "query_loss"]
        + [f"grad_norm_step_{k}" for k in range(1, inner_steps + 1)]
        + ["sec_per_iter"]
    )


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class RunResult:
    status: int
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    config_path: Path
    rows: list = field(default_factory=list)
    params: object = None
    task_digest: str = ""
    sec_per_iter: float = math.nan


def run_experiment(config, log=None):
    """Meta-train per ``config`` and write its artifacts.

    Raises ``ConfigError`` for invalid settings, ``OSError`` for I/O failures
    and ``ArithmeticError`` subclasses for numerical failures.
    """
    train_family, test_family, scenario = _families(config)
    objective = MLP(_model_config(config, train_family))
    cfg = config.meta_config()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.txt"
    config_path.write_text("\n".join(config.to_lines()) + "\n")

    digest = hashlib.sha256()
    eval_split = "test"
    eval_seeds = [task_seed(config.seed, EVAL_STREAM, i) for i in range(config.eval_tasks)]
    eval_tasks = [
        test_family.sample(config.ways, config.shots, config.query, s, split=eval_split)
        for s in eval_seeds
    ]
    digest.update(repr(("eval", eval_seeds)).encode())

    params = objective.init_params(config.seed)
    header = metrics_header(config.inner_steps)
    rows = []
    durations = []
    pending_losses = []
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for it in range(1, config.episodes + 1):
            start = time.perf_counter()
            seeds = [
                task_seed(config.seed, TRAIN_STREAM, (it - 1) * config.task_batch + j)
                for j in range(config.task_batch)
            ]
            tasks = [
                train_family.sample(config.ways, config.shots, config.query, s, split="train")
                for s in seeds
            ]
            params, info = meta_step_info(objective, params, tasks, cfg)
            durations.append(time.perf_counter() - start)
            digest.update(repr(seeds).encode())
            pending_losses.append(info.query_loss)
            if it % config.eval_every == 0 or it == config.episodes:
                report = evaluate(objective, params, eval_tasks, cfg)
                row = [it, scenario, config.method, report.metric,
                       float(sum(pending_losses) / len(pending_losses)),
                       report.mean, report.ci95, report.query_loss]
                row += [float(v) for v in report.grad_norms]
                row.append(float(statistics.median(durations)))
                writer.writerow([_fmt(v) for v in row])
                fh.flush()
                rows.append(dict(zip(header, row)))
                pending_losses = []
                if log:
                    log(f"[{config.method}] iter {it}: {report.metric}={report.mean:.4f} "
                        f"+/- {report.ci95:.4f}, meta_loss={row[4]:.4f}")

    checkpoint_path = out / "checkpoint.json"
    save_params(params, checkpoint_path)
    return RunResult(
        status=0,
        out_dir=out,
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
        config_path=config_path,
        rows=rows,
        params=params,
        task_digest=digest.hexdigest(),
        sec_per_iter=float(statistics.median(durations)),
    )


# --------------------------------------------------------------------------
# comparisons


@dataclass
class CompareResult:
    status: int
    path: Path
    summary_path: Path
    runs: dict
    rows: list
    summary: dict


def compare_methods(config, methods, log=None):
    """Run each method on identical seeds and write a side-by-side CSV.

    ``config.order`` applies to every method when set; otherwise each method
    uses its own default.
    """
    methods = list(dict.fromkeys(methods))
    if len(methods) < 2:
        raise ConfigError("compare needs at least two distinct methods")
    base = Path(config.out)
    runs = {}
    for m in methods:
        sub = dataclasses.replace(config, method=m, out=str(base / m))
        runs[m] = run_experiment(sub, log=log)

    k = config.inner_steps
    header = ["iter"]
    for m in methods:
        header += [f"{m}_acc_mean", f"{m}_acc_ci95"]
        header += [f"{m}_grad_norm_step_{s}" for s in range(1, k + 1)]
        header += [f"{m}_sec_per_iter"]
    rows = []
    for i, first in enumerate(runs[methods[0]].rows):
        row = [first["iter"]]
        for m in methods:
            r = runs[m].rows[i]
            row += [r["query_acc_mean"], r["query_acc_ci95"]]
            row += [r[f"grad_norm_step_{s}"] for s in range(1, k + 1)]
            row += [r["sec_per_iter"]]
        rows.append(dict(zip(header, row)))
    path = base / "comparison.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])

    summary = {"methods": ",".join(methods), "paired_tasks": len({r.task_digest for r in runs.values()}) == 1}
    for m in methods:
        last = runs[m].rows[-1]
        summary[f"{m}_acc_mean"] = last["query_acc_mean"]
        summary[f"{m}_sec_per_iter"] = runs[m].sec_per_iter
        summary[f"{m}_mean_grad_norm"] = (
            float(sum(last[f"grad_norm_step_{s}"] for s in range(1, k + 1)) / k) if k else 0.0
        )
    lines = [f"{key}={_fmt(v) if isinstance(v, float) else v}" for key, v in summary.items()]
    ref = methods[0]
    for m in methods[1:]:
        ratio = runs[m].sec_per_iter / runs[ref].sec_per_iter
        summary[f"time_ratio_{m}_vs_{ref}"] = ratio
        lines.append(f"time_ratio_{m}_vs_{ref}={ratio:.3f}")
        if k:
            higher = sum(
                runs[m].rows[i][f"grad_norm_step_{s}"] > runs[ref].rows[i][f"grad_norm_step_{s}"]
                for i in range(len(rows)) for s in range(1, k + 1)
            )
            total = len(rows) * k
            summary[f"grad_norm_higher_{m}_vs_{ref}"] = higher / total
            lines.append(
                f"grad_norm_higher_{m}_vs_{ref}={higher}/{total} adaptation steps"
            )
    summary_path = base / "comparison_summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    return CompareResult(0, path, summary_path, runs, rows, summary)
