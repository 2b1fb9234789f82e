"""Experiment harness: configs, datasets, and the command-line interface.

Configs are flat JSON documents (schema below); outputs are CSV curves plus
a JSON summary per run, written atomically so identical inputs always yield
byte-identical files.

Config keys (defaults in parentheses):
  powers                list[float], per-user transmit power   [required]
  dim                   int, model dimensionality              [required]
  noise_var             float (1.0)
  channel_uses          int | null  -- absolute s
  channel_uses_per_dim  float | null -- s = round(factor * dim); (2.0) when
                        neither is given; setting both is an error
  loss                  "quadratic" | "logistic" | "softmax" ("quadratic")
  policy                one of the training policies ("mac-aware")
  iterations            int (100)
  seed                  int (0)
  dataset               "synthetic" | "mnist" ("synthetic")
  samples_per_user      int or list[int] (1000)
  user_scales           list[float] | null (all 1.0)
  user_labels           list[list[int] | null] | null (every user sees all classes)
  num_classes           int (10), softmax only
  feature_noise         float (1.0), synthetic classification spread
  mnist_images          path to IDX image file (dataset = "mnist")
  mnist_labels          path to IDX label file (dataset = "mnist")
  lr_schedule           "inverse_time" | "constant" (inverse_time for
                        quadratic, constant otherwise)
  learning_rate         float (0.5), constant schedule only
  eval_every            int (10)
  lipschitz_bound       float | null, feeds the convergence bound
  topq_scalar_bits      int (32)
  count_range_overhead  bool (false)
  init                  "zeros" | "gaussian" ("zeros")
  init_scale            float (1.0)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.random import Generator, Philox

from macquant import baselines, trainer
from macquant.allocator import (
    AllocationProblem,
    InfeasibleBudgetError,
    allocate,
    solve_relaxed,
    solve_two_user,
)
from macquant.channel import InfeasibleRateError, MacSpec, budget_cap, subset_constraints, sum_capacity
from macquant.trainer import (
    ConstantRate,
    InverseTimeRate,
    LogisticLoss,
    QuadraticLoss,
    SoftmaxLoss,
    TrainingSetup,
    UserDataset,
    canonical_policy,
    run_training,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "IdxFormatError",
    "build_setup",
    "generate_synthetic",
    "load_config",
    "load_mnist_idx",
    "main",
]

OUT_DIR_ENV = "MACQUANT_OUT"


class ConfigError(Exception):
    """Invalid experiment config; message names the offending field."""


class IdxFormatError(Exception):
    """An IDX file failed magic/shape/length validation."""


_DEFAULTS = {
    "noise_var": 1.0,
    "channel_uses": None,
    "channel_uses_per_dim": None,
    "loss": "quadratic",
    "policy": "mac-aware",
    "iterations": 100,
    "seed": 0,
    "dataset": "synthetic",
    "samples_per_user": 1000,
    "user_scales": None,
    "user_labels": None,
    "num_classes": 10,
    "feature_noise": 1.0,
    "mnist_images": None,
    "mnist_labels": None,
    "lr_schedule": None,
    "learning_rate": 0.5,
    "eval_every": 10,
    "lipschitz_bound": None,
    "topq_scalar_bits": 32,
    "count_range_overhead": False,
    "init": "zeros",
    "init_scale": 1.0,
}

_REQUIRED = ("powers", "dim")


@dataclass
class ExperimentConfig:
    powers: tuple
    dim: int
    noise_var: float
    channel_uses: int
    loss: str
    policy: str
    iterations: int
    seed: int
    dataset: str
    samples_per_user: tuple
    user_scales: tuple
    user_labels: tuple
    num_classes: int
    feature_noise: float
    mnist_images: Optional[str]
    mnist_labels: Optional[str]
    lr_schedule: str
    learning_rate: float
    eval_every: int
    lipschitz_bound: Optional[float]
    topq_scalar_bits: int
    count_range_overhead: bool
    init: str
    init_scale: float
    config_hash: str = field(default="", repr=False)

    @property
    def num_users(self) -> int:
        return len(self.powers)

    def mac_spec(self) -> MacSpec:
        return MacSpec(
            powers=self.powers,
            noise_var=self.noise_var,
            channel_uses=self.channel_uses,
            dim=self.dim,
        )


def _fail(fieldname: str, message: str):
    raise ConfigError(f"config field {fieldname!r}: {message}")


def _as_positive_int(raw, name, minimum=1) -> int:
    if not isinstance(raw, int) or isinstance(raw, bool) or raw < minimum:
        _fail(name, f"expected an integer >= {minimum}, got {raw!r}")
    return raw


def _as_number(raw, name, minimum=None, positive=False) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
        _fail(name, f"expected a finite number, got {raw!r}")
    if positive and raw <= 0:
        _fail(name, f"must be > 0, got {raw!r}")
    if minimum is not None and raw < minimum:
        _fail(name, f"must be >= {minimum}, got {raw!r}")
    return float(raw)


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment config file; unknown keys are rejected."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")

    unknown = sorted(set(raw) - set(_DEFAULTS) - set(_REQUIRED))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key in _REQUIRED:
        if key not in raw:
            _fail(key, "is required")

    merged = dict(_DEFAULTS)
    merged.update(raw)

    powers_raw = merged["powers"]
    if not isinstance(powers_raw, list) or not powers_raw:
        _fail("powers", "expected a nonempty list")
    powers = tuple(_as_number(p, "powers", minimum=0.0) for p in powers_raw)
    m_users = len(powers)

    dim = _as_positive_int(merged["dim"], "dim")
    noise_var = _as_number(merged["noise_var"], "noise_var", positive=True)

    if merged["channel_uses"] is not None and merged["channel_uses_per_dim"] is not None:
        _fail("channel_uses", "set either channel_uses or channel_uses_per_dim, not both")
    if merged["channel_uses"] is not None:
        channel_uses = _as_positive_int(merged["channel_uses"], "channel_uses")
    else:
        factor = merged["channel_uses_per_dim"]
        factor = 2.0 if factor is None else _as_number(factor, "channel_uses_per_dim", positive=True)
        channel_uses = int(round(factor * dim))
        if channel_uses < 1:
            _fail("channel_uses_per_dim", "yields zero channel uses")

    loss_kind = merged["loss"]
    if loss_kind not in ("quadratic", "logistic", "softmax"):
        _fail("loss", f"unknown loss {loss_kind!r}")

    try:
        policy = canonical_policy(merged["policy"])
    except ValueError as exc:
        _fail("policy", str(exc))

    iterations = _as_positive_int(merged["iterations"], "iterations")
    seed = merged["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _fail("seed", f"expected a nonnegative integer, got {seed!r}")

    dataset = merged["dataset"]
    if dataset not in ("synthetic", "mnist"):
        _fail("dataset", f"unknown dataset kind {dataset!r}")

    spu_raw = merged["samples_per_user"]
    if isinstance(spu_raw, list):
        if len(spu_raw) != m_users:
            _fail("samples_per_user", f"list must have {m_users} entries")
        samples_per_user = tuple(_as_positive_int(n, "samples_per_user") for n in spu_raw)
    else:
        samples_per_user = (_as_positive_int(spu_raw, "samples_per_user"),) * m_users

    scales_raw = merged["user_scales"]
    if scales_raw is None:
        user_scales = (1.0,) * m_users
    else:
        if not isinstance(scales_raw, list) or len(scales_raw) != m_users:
            _fail("user_scales", f"expected a list of {m_users} scales")
        user_scales = tuple(_as_number(x, "user_scales", positive=True) for x in scales_raw)

    labels_raw = merged["user_labels"]
    if labels_raw is None:
        user_labels = (None,) * m_users
    else:
        if not isinstance(labels_raw, list) or len(labels_raw) != m_users:
            _fail("user_labels", f"expected a list of {m_users} entries")
        cleaned = []
        for entry in labels_raw:
            if entry is None:
                cleaned.append(None)
            elif isinstance(entry, list) and entry and all(isinstance(v, int) and v >= 0 for v in entry):
                cleaned.append(tuple(sorted(set(entry))))
            else:
                _fail("user_labels", f"each entry must be null or a list of label ints, got {entry!r}")
        user_labels = tuple(cleaned)

    num_classes = _as_positive_int(merged["num_classes"], "num_classes", minimum=2)
    feature_noise = _as_number(merged["feature_noise"], "feature_noise", positive=True)

    mnist_images = merged["mnist_images"]
    mnist_labels = merged["mnist_labels"]
    if dataset == "mnist":
        for key, val in (("mnist_images", mnist_images), ("mnist_labels", mnist_labels)):
            if not isinstance(val, str):
                _fail(key, "required for dataset = 'mnist'")
            if not os.path.exists(val):
                _fail(key, f"file does not exist: {val}")

    lr_schedule = merged["lr_schedule"]
    if lr_schedule is None:
        lr_schedule = "inverse_time" if loss_kind == "quadratic" else "constant"
    if lr_schedule not in ("inverse_time", "constant"):
        _fail("lr_schedule", f"unknown schedule {lr_schedule!r}")
    if lr_schedule == "inverse_time" and loss_kind != "quadratic":
        _fail("lr_schedule", "inverse_time requires a quadratic loss (known strong convexity)")

    learning_rate = _as_number(merged["learning_rate"], "learning_rate", positive=True)
    eval_every = _as_positive_int(merged["eval_every"], "eval_every")
    lipschitz_bound = merged["lipschitz_bound"]
    if lipschitz_bound is not None:
        lipschitz_bound = _as_number(lipschitz_bound, "lipschitz_bound", positive=True)
    topq_scalar_bits = _as_positive_int(merged["topq_scalar_bits"], "topq_scalar_bits")
    count_range_overhead = merged["count_range_overhead"]
    if not isinstance(count_range_overhead, bool):
        _fail("count_range_overhead", "expected true/false")
    init = merged["init"]
    if init not in ("zeros", "gaussian"):
        _fail("init", f"unknown init {init!r}")
    init_scale = _as_number(merged["init_scale"], "init_scale", positive=True)

    if loss_kind == "softmax":
        if dim % num_classes != 0 or dim // num_classes < 2:
            _fail("dim", f"softmax needs dim = num_classes * (features + 1), got dim={dim}, num_classes={num_classes}")
    if loss_kind == "logistic" and dim < 2:
        _fail("dim", "logistic needs dim = features + 1 >= 2")

    resolved = dict(merged)
    resolved["powers"] = list(powers)
    resolved["channel_uses"] = channel_uses
    resolved["channel_uses_per_dim"] = None
    resolved["lr_schedule"] = lr_schedule
    digest = hashlib.sha256(
        json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()

    return ExperimentConfig(
        powers=powers,
        dim=dim,
        noise_var=noise_var,
        channel_uses=channel_uses,
        loss=loss_kind,
        policy=policy,
        iterations=iterations,
        seed=seed,
        dataset=dataset,
        samples_per_user=samples_per_user,
        user_scales=user_scales,
        user_labels=user_labels,
        num_classes=num_classes,
        feature_noise=feature_noise,
        mnist_images=mnist_images,
        mnist_labels=mnist_labels,
        lr_schedule=lr_schedule,
        learning_rate=learning_rate,
        eval_every=eval_every,
        lipschitz_bound=lipschitz_bound,
        topq_scalar_bits=topq_scalar_bits,
        count_range_overhead=count_range_overhead,
        init=init,
        init_scale=init_scale,
        config_hash=digest,
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _data_rng(seed: int, stream: int, user: int) -> Generator:
    word = (stream << 56) | user
    return Generator(Philox(key=np.array([seed & (2**64 - 1), word], dtype=np.uint64)))


def generate_synthetic(
    loss_kind: str,
    dim: int,
    samples_per_user,
    user_scales,
    seed: int,
    num_classes: int = 10,
    feature_noise: float = 1.0,
    user_labels=None,
):
    """Seeded per-user datasets with controllable gradient heterogeneity.

    Quadratic users draw target points around a scaled random center, so the
    ratio of user scales sets the ratio of gradient dynamic ranges at w = 0.
    Classification users draw class-cluster features (shared prototypes)
    scaled per user, optionally restricted to a label subset.
    """
    m_users = len(user_scales)
    if len(samples_per_user) != m_users:
        raise ValueError("samples_per_user and user_scales must have equal length")
    if user_labels is None:
        user_labels = (None,) * m_users

    datasets = []
    if loss_kind == "quadratic":
        for m in range(m_users):
            rng = _data_rng(seed, trainer.STREAM_DATA, m)
            center = user_scales[m] * rng.normal(size=dim)
            points = center[None, :] + 0.1 * user_scales[m] * rng.normal(
                size=(samples_per_user[m], dim)
            )
            datasets.append(UserDataset(x=points))
        return datasets

    if loss_kind == "logistic":
        num_classes = 2
        features = dim - 1
    elif loss_kind == "softmax":
        if dim % num_classes != 0:
            raise ValueError("softmax needs dim divisible by num_classes")
        features = dim // num_classes - 1
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if features < 1:
        raise ValueError("need at least one feature")

    proto_rng = _data_rng(seed, trainer.STREAM_DATA, 2**24 - 1)
    prototypes = proto_rng.normal(size=(num_classes, features))
    for m in range(m_users):
        rng = _data_rng(seed, trainer.STREAM_DATA, m)
        allowed = user_labels[m]
        classes = np.arange(num_classes) if allowed is None else np.asarray(allowed)
        if classes.max() >= num_classes:
            raise ValueError(f"user {m} label filter exceeds num_classes - 1")
        y = classes[rng.integers(0, classes.size, size=samples_per_user[m])]
        x = user_scales[m] * (
            prototypes[y] + feature_noise * rng.normal(size=(samples_per_user[m], features))
        )
        datasets.append(UserDataset(x=x, y=y))
    return datasets


_IDX_IMAGE_MAGIC = 2051
_IDX_LABEL_MAGIC = 2049


def load_mnist_idx(images_path, labels_path):
    """Read IDX image/label files into ([0,1]-scaled features, integer labels)."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"{images_path}: truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: bad image magic {magic} (expected {_IDX_IMAGE_MAGIC})")
        body = fh.read()
    expected = count * rows * cols
    if len(body) != expected:
        raise IdxFormatError(f"{images_path}: expected {expected} pixel bytes, got {len(body)}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols) / 255.0

    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{labels_path}: truncated IDX label header")
        magic, label_count = struct.unpack(">II", header)
        if magic != _IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad label magic {magic} (expected {_IDX_LABEL_MAGIC})")
        body = fh.read()
    if len(body) != label_count:
        raise IdxFormatError(f"{labels_path}: expected {label_count} label bytes, got {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise IdxFormatError(f"image count {count} does not match label count {label_count}")
    return images, labels


def _mnist_datasets(cfg: ExperimentConfig):
    images, labels = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
    features = cfg.dim // cfg.num_classes - 1 if cfg.loss == "softmax" else cfg.dim - 1
    if images.shape[1] != features:
        raise ConfigError(
            f"dim implies {features} features but IDX images have {images.shape[1]} pixels"
        )
    datasets = []
    for m in range(cfg.num_users):
        allowed = cfg.user_labels[m]
        if allowed is None:
            mask = np.ones(labels.size, dtype=bool)
        else:
            mask = np.isin(labels, np.asarray(allowed))
        if not mask.any():
            raise ConfigError(f"user {m} label filter selects no examples")
        datasets.append(UserDataset(x=images[mask], y=labels[mask]))
    return datasets


# ---------------------------------------------------------------------------
# Setup assembly
# ---------------------------------------------------------------------------

def build_loss(cfg: ExperimentConfig):
    if cfg.loss == "quadratic":
        return QuadraticLoss()
    if cfg.loss == "logistic":
        return LogisticLoss()
    return SoftmaxLoss(cfg.num_classes)


def build_datasets(cfg: ExperimentConfig):
    if cfg.dataset == "mnist":
        return _mnist_datasets(cfg)
    return generate_synthetic(
        cfg.loss,
        cfg.dim,
        cfg.samples_per_user,
        cfg.user_scales,
        cfg.seed,
        num_classes=cfg.num_classes,
        feature_noise=cfg.feature_noise,
        user_labels=cfg.user_labels,
    )


def build_setup(cfg: ExperimentConfig, policy: Optional[str] = None) -> TrainingSetup:
    """Turn a validated config into a runnable TrainingSetup."""
    loss = build_loss(cfg)
    datasets = build_datasets(cfg)
    if cfg.lr_schedule == "inverse_time":
        lam, _ = QuadraticLoss.curvature(datasets)
        schedule = InverseTimeRate(lam)
    else:
        schedule = ConstantRate(cfg.learning_rate)
    if cfg.init == "zeros":
        w0 = np.zeros(cfg.dim)
    else:
        w0 = cfg.init_scale * _data_rng(cfg.seed, trainer.STREAM_INIT, 0).normal(size=cfg.dim)
    return TrainingSetup(
        spec=cfg.mac_spec(),
        loss=loss,
        datasets=datasets,
        policy=policy or cfg.policy,
        iterations=cfg.iterations,
        seed=cfg.seed,
        schedule=schedule,
        w0=w0,
        eval_every=cfg.eval_every,
        topq_scalar_bits=cfg.topq_scalar_bits,
        count_range_overhead=cfg.count_range_overhead,
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def metrics_csv_text(metrics, num_users: int) -> str:
    header = ["t", "loss", "accuracy", "grad_norm", "variance_term", "analytic_bits", "wire_bits"]
    header += [f"delta_{m}" for m in range(num_users)]
    header += [f"k_{m}" for m in range(num_users)]
    lines = [",".join(header)]
    for row in metrics:
        cells = [
            str(row.t),
            _fmt(row.loss),
            _fmt(row.accuracy),
            _fmt(row.grad_norm),
            _fmt(row.variance_term),
            _fmt(row.analytic_bits),
            _fmt(row.wire_bits),
        ]
        cells += [_fmt(x) for x in row.deltas]
        cells += [str(int(k)) for k in row.budgets]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def summary_dict(cfg: ExperimentConfig, policy: str, metrics) -> dict:
    last = metrics[-1]
    return {
        "config_hash": cfg.config_hash,
        "policy": policy,
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "total_analytic_bits": float(sum(r.analytic_bits for r in metrics)),
        "total_wire_bits": float(sum(r.wire_bits for r in metrics)),
    }


def _write_run(out_dir: str, cfg: ExperimentConfig, policy: str, metrics) -> dict:
    csv_path = os.path.join(out_dir, f"{policy}.csv")
    json_path = os.path.join(out_dir, f"{policy}.json")
    _atomic_write(csv_path, metrics_csv_text(metrics, cfg.num_users))
    summary = summary_dict(cfg, policy, metrics)
    _atomic_write(json_path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_capacity(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.mac_spec()
    print(f"users: {spec.num_users}  dim: {spec.dim}  channel_uses: {spec.channel_uses}  noise_var: {spec.noise_var}")
    for users, cap_bits in subset_constraints(spec):
        label = "{" + ",".join(str(m + 1) for m in users) + "}"
        cap = sum_capacity(spec, users)
        print(
            f"subset {label}: C = {cap:.4f} bits/use | s*C = {cap_bits:.1f} bits "
            f"| budget cap {budget_cap(spec, users):.4f}"
        )
    return 0


def _cmd_allocate(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.mac_spec()
    try:
        deltas = tuple(float(x) for x in args.deltas.split(","))
    except ValueError:
        raise ConfigError(f"--deltas must be comma-separated numbers, got {args.deltas!r}")
    if len(deltas) != spec.num_users:
        raise ConfigError(f"--deltas needs {spec.num_users} values")
    problem = AllocationProblem(deltas, spec)
    if spec.num_users == 2:
        k_real = solve_two_user(deltas[0], deltas[1], spec)
    else:
        k_real = solve_relaxed(problem)
    alloc = allocate(problem)
    print("deltas:          " + ", ".join(f"{x:g}" for x in deltas))
    print("relaxed budgets: " + ", ".join(f"{x:.6f}" for x in k_real))
    print("integer budgets: (" + ", ".join(str(k) for k in alloc.k_int) + ")")
    print("rates (bits):    " + ", ".join(f"{r:.1f}" for r in alloc.rates))
    print(f"objective:       {alloc.objective:.6g}")
    return 0


def _out_dir(args) -> str:
    if args.out:
        return args.out
    return os.environ.get(OUT_DIR_ENV, "out")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    policy = canonical_policy(args.policy) if args.policy else cfg.policy
    setup = build_setup(cfg, policy)
    metrics = run_training(setup)
    summary = _write_run(_out_dir(args), cfg, policy, metrics)
    acc = summary["final_accuracy"]
    acc_text = f"  final_accuracy={acc:.4f}" if acc is not None else ""
    print(f"policy={policy}  final_loss={summary['final_loss']:.6g}{acc_text}")
    return 0


def _cmd_compare(args) -> int:
    cfg = load_config(args.config)
    policies = [canonical_policy(p) for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise ConfigError("--policies must name at least one policy")
    out_dir = _out_dir(args)
    summaries = {}
    curves = {}
    for policy in policies:
        setup = build_setup(cfg, policy)
        metrics = run_training(setup)
        summaries[policy] = _write_run(out_dir, cfg, policy, metrics)
        curves[policy] = metrics

    lines = ["policy,t,loss,accuracy"]
    for policy in policies:
        for row in curves[policy]:
            lines.append(f"{policy},{row.t},{_fmt(row.loss)},{_fmt(row.accuracy)}")
    _atomic_write(os.path.join(out_dir, "compare.csv"), "\n".join(lines) + "\n")
    _atomic_write(
        os.path.join(out_dir, "compare.json"),
        json.dumps(summaries, sort_keys=True, indent=2) + "\n",
    )
    for policy in policies:
        s = summaries[policy]
        acc = s["final_accuracy"]
        acc_text = f"  final_accuracy={acc:.4f}" if acc is not None else ""
        print(f"policy={policy}  final_loss={s['final_loss']:.6g}{acc_text}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macquant",
        description="Channel-aware gradient quantization experiments over a Gaussian MAC",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cap = sub.add_parser("capacity", help="print subset capacities and budget caps")
    p_cap.add_argument("--config", required=True)
    p_cap.set_defaults(func=_cmd_capacity)

    p_alloc = sub.add_parser("allocate", help="solve the budget allocation for given deltas")
    p_alloc.add_argument("--config", required=True)
    p_alloc.add_argument("--deltas", required=True, help="comma-separated per-user dynamic ranges")
    p_alloc.set_defaults(func=_cmd_allocate)

    p_train = sub.add_parser("train", help="run one policy and emit metrics")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None, help=f"output dir (default ${OUT_DIR_ENV} or ./out)")
    p_train.add_argument("--policy", default=None, help="override the config's policy")
    p_train.set_defaults(func=_cmd_train)

    p_cmp = sub.add_parser("compare", help="run several policies on identical seeds/data")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--policies", required=True, help="comma-separated policy names")
    p_cmp.add_argument("--out", default=None, help=f"output dir (default ${OUT_DIR_ENV} or ./out)")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, InfeasibleRateError, InfeasibleBudgetError,
            baselines.InfeasibleTopQError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
