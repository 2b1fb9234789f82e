import json
import os
import struct

import numpy as np
import pytest

from macquant.cli import (
    ConfigError,
    IdxFormatError,
    build_setup,
    generate_synthetic,
    load_config,
    load_mnist_idx,
    main,
)
from macquant.trainer import QuadraticLoss, local_gradient

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {"powers": [80.0, 20.0], "dim": 12, "iterations": 5, "seed": 3}
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.noise_var == 1.0
    assert cfg.channel_uses == 24  # default factor 2 * dim
    assert cfg.loss == "quadratic"
    assert cfg.policy == "mac-aware"
    assert cfg.lr_schedule == "inverse_time"
    assert cfg.eval_every == 10
    assert cfg.user_scales == (1.0, 1.0)
    assert cfg.config_hash


def test_unknown_keys_rejected(tmp_path):
    path = write_config(tmp_path, typo_key=1)
    with pytest.raises(ConfigError, match="typo_key"):
        load_config(path)


def test_negative_power_names_field(tmp_path):
    path = write_config(tmp_path, powers=[-1.0, 5.0])
    with pytest.raises(ConfigError, match="powers"):
        load_config(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "powers": [1.0,\n}')
    with pytest.raises(ConfigError, match="line"):
        load_config(str(path))


def test_channel_uses_exclusive(tmp_path):
    path = write_config(tmp_path, channel_uses=10, channel_uses_per_dim=2.0)
    with pytest.raises(ConfigError, match="channel_uses"):
        load_config(path)


def test_softmax_dim_consistency(tmp_path):
    path = write_config(tmp_path, loss="softmax", dim=55, num_classes=10)
    with pytest.raises(ConfigError, match="dim"):
        load_config(path)


def test_inverse_time_requires_quadratic(tmp_path):
    path = write_config(
        tmp_path, loss="softmax", dim=30, num_classes=10, lr_schedule="inverse_time"
    )
    with pytest.raises(ConfigError, match="lr_schedule"):
        load_config(path)


def test_shipped_reference_config():
    cfg = load_config(os.path.join(CONFIG_DIR, "softmax_7850_2user.json"))
    assert cfg.dim == 7850
    assert cfg.channel_uses == 2 * 7850
    assert cfg.noise_var == 1.0
    assert cfg.powers == (95.0, 5.0)  # 0.95 / 0.05 of total power 100
    assert sum(cfg.powers) == pytest.approx(100.0)
    assert cfg.iterations == 1000
    assert cfg.user_labels[0] == (0, 1)
    assert cfg.user_labels[1] is None
    assert cfg.loss == "softmax"


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_synthetic_quadratic_delta_ratio_calibration():
    dim = 200
    ds = generate_synthetic("quadratic", dim, (50, 50), (10.0, 1.0), seed=12)
    grads = [local_gradient(QuadraticLoss(), np.zeros(dim), d) for d in ds]
    ranges = [g.max() - g.min() for g in grads]
    ratio = ranges[0] / ranges[1]
    assert abs(ratio - 10.0) <= 2.0  # within 20%


def test_synthetic_deterministic_and_seed_sensitive():
    a = generate_synthetic("quadratic", 8, (5, 5), (1.0, 1.0), seed=7)
    b = generate_synthetic("quadratic", 8, (5, 5), (1.0, 1.0), seed=7)
    c = generate_synthetic("quadratic", 8, (5, 5), (1.0, 1.0), seed=8)
    for da, db in zip(a, b):
        assert np.array_equal(da.x, db.x)
    assert not np.array_equal(a[0].x, c[0].x)


def test_synthetic_single_user_and_label_filter():
    ds = generate_synthetic("quadratic", 6, (9,), (1.0,), seed=0)
    assert len(ds) == 1 and ds[0].x.shape == (9, 6)
    ds = generate_synthetic(
        "softmax", 30, (40, 40), (1.0, 1.0), seed=1, num_classes=10,
        user_labels=((0, 1), None),
    )
    assert set(np.unique(ds[0].y)) <= {0, 1}
    assert len(set(np.unique(ds[1].y))) > 2


# ---------------------------------------------------------------------------
# IDX parsing
# ---------------------------------------------------------------------------

def make_idx_pair(tmp_path, n=20, rows=4, cols=3, image_magic=2051, label_magic=2049,
                  truncate_images=0):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(n, rows * cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    body = pixels.tobytes()
    if truncate_images:
        body = body[:-truncate_images]
    img_path.write_bytes(struct.pack(">IIII", image_magic, n, rows, cols) + body)
    lbl_path.write_bytes(struct.pack(">II", label_magic, n) + labels.tobytes())
    return str(img_path), str(lbl_path), pixels, labels


def test_idx_roundtrip(tmp_path):
    img, lbl, pixels, labels = make_idx_pair(tmp_path)
    x, y = load_mnist_idx(img, lbl)
    assert x.shape == (20, 12)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert np.allclose(x * 255.0, pixels)
    assert np.array_equal(y, labels)


def test_idx_bad_magic(tmp_path):
    img, lbl, *_ = make_idx_pair(tmp_path, image_magic=2049)
    with pytest.raises(IdxFormatError, match="magic"):
        load_mnist_idx(img, lbl)


def test_idx_truncated(tmp_path):
    img, lbl, *_ = make_idx_pair(tmp_path, truncate_images=5)
    with pytest.raises(IdxFormatError, match="pixel"):
        load_mnist_idx(img, lbl)


def test_mnist_dataset_label_filter(tmp_path):
    img, lbl, _, labels = make_idx_pair(tmp_path, n=60, rows=2, cols=2)
    path = write_config(
        tmp_path,
        loss="softmax",
        dim=50,  # 10 * (4 + 1)
        num_classes=10,
        dataset="mnist",
        mnist_images=img,
        mnist_labels=lbl,
        user_labels=[[0, 1], None],
        lr_schedule="constant",
    )
    cfg = load_config(path)
    setup = build_setup(cfg)
    assert set(np.unique(setup.datasets[0].y)) <= {0, 1}
    assert setup.datasets[1].num_examples == 60


def test_mnist_missing_file_rejected(tmp_path):
    path = write_config(
        tmp_path, dataset="mnist", mnist_images="/nonexistent", mnist_labels="/nonexistent"
    )
    with pytest.raises(ConfigError, match="mnist_images"):
        load_config(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def test_capacity_subcommand_prints_reference(capsys):
    rc = main(["capacity", "--config", os.path.join(CONFIG_DIR, "twouser_power_80_20.json")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "3.1699" in out
    assert "2.1962" in out
    assert "3.3291" in out


def test_allocate_subcommand_prints_table_row(capsys):
    rc = main([
        "allocate",
        "--config", os.path.join(CONFIG_DIR, "twouser_power_80_20.json"),
        "--deltas", "50,50",
    ])
    out = capsys.readouterr().out
    assert rc == 0
    assert "(10, 10)" in out


def test_allocate_wrong_delta_count(tmp_path, capsys):
    rc = main([
        "allocate",
        "--config", write_config(tmp_path),
        "--deltas", "1,2,3",
    ])
    assert rc == 1
    assert "deltas" in capsys.readouterr().err


def test_train_writes_metrics_and_is_byte_identical(tmp_path, capsys):
    cfg_path = write_config(tmp_path, iterations=8)
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert main(["train", "--config", cfg_path, "--out", str(out1)]) == 0
    assert main(["train", "--config", cfg_path, "--out", str(out2)]) == 0
    csv1 = (out1 / "mac-aware.csv").read_bytes()
    csv2 = (out2 / "mac-aware.csv").read_bytes()
    assert csv1 == csv2
    assert (out1 / "mac-aware.json").read_bytes() == (out2 / "mac-aware.json").read_bytes()
    header = csv1.decode().splitlines()[0]
    assert header == "t,loss,accuracy,grad_norm,variance_term,analytic_bits,wire_bits,delta_0,delta_1,k_0,k_1"
    summary = json.loads((out1 / "mac-aware.json").read_text())
    assert summary["policy"] == "mac-aware"
    assert summary["iterations"] == 8
    assert "config_hash" in summary and "total_analytic_bits" in summary


def test_train_policy_override(tmp_path, capsys):
    cfg_path = write_config(tmp_path, iterations=4)
    out = tmp_path / "o"
    assert main(["train", "--config", cfg_path, "--out", str(out), "--policy", "uniform"]) == 0
    assert (out / "uniform.csv").exists()


def test_compare_alignment_and_outputs(tmp_path):
    cfg_path = write_config(tmp_path, iterations=6)
    out = tmp_path / "cmp"
    rc = main([
        "compare", "--config", cfg_path,
        "--policies", "mac-aware,uniform,full-resolution",
        "--out", str(out),
    ])
    assert rc == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == "policy,t,loss,accuracy"
    rows = [ln.split(",") for ln in lines[1:]]
    by_policy = {}
    for policy, t, *_ in rows:
        by_policy.setdefault(policy, []).append(int(t))
    assert set(by_policy) == {"mac-aware", "uniform", "full-resolution"}
    grids = list(by_policy.values())
    assert grids[0] == grids[1] == grids[2] == list(range(1, 7))
    summaries = json.loads((out / "compare.json").read_text())
    assert set(summaries) == {"mac-aware", "uniform", "full-resolution"}


def test_out_dir_env_default(tmp_path, monkeypatch):
    cfg_path = write_config(tmp_path, iterations=2)
    target = tmp_path / "envout"
    monkeypatch.setenv("MACQUANT_OUT", str(target))
    assert main(["train", "--config", cfg_path]) == 0
    assert (target / "mac-aware.csv").exists()


def test_invalid_config_nonzero_exit(tmp_path, capsys):
    path = write_config(tmp_path, powers=[-5.0])
    rc = main(["train", "--config", path, "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "powers" in capsys.readouterr().err
