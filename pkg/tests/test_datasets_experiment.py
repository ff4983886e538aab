import csv
import json
import struct

import numpy as np
import pytest

from ntkuq import (
    ArchitectureConfig,
    Dataset,
    ExperimentPlan,
    InputSet,
    emit_plot_data,
    energy_from_label,
    load_event_vectors,
    load_idx,
    load_plan_file,
    make_synthetic,
    run_plan,
    save_event_vectors,
)
from ntkuq.cli import main as cli_main


# ---------------------------------------------------------------- datasets


def _write_idx(tmp_path, images, digits, tag=""):
    n, r, c = images.shape
    img_path = tmp_path / ("img%s.idx" % tag)
    lab_path = tmp_path / ("lab%s.idx" % tag)
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, r, c))
        f.write(images.astype(np.uint8).tobytes())
    with open(lab_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(np.asarray(digits, dtype=np.uint8).tobytes())
    return img_path, lab_path


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    digits = [0, 9, 3, 3, 7]
    img_path, lab_path = _write_idx(tmp_path, images, digits)
    ds = load_idx(img_path, lab_path)
    assert ds.count == 5
    assert ds.inputs.input_dim == 12
    assert ds.n_out == 10
    np.testing.assert_allclose(
        ds.inputs.points, images.reshape(5, 12).astype(float) / 255.0
    )
    np.testing.assert_array_equal(np.argmax(ds.labels, axis=1), digits)
    np.testing.assert_allclose(ds.labels.sum(axis=1), 1.0)


def test_idx_bad_magic_and_truncation(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img_path, lab_path = _write_idx(tmp_path, images, [1, 2])
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 2, 2, 2))
    with pytest.raises(ValueError):
        load_idx(bad, lab_path)
    trunc = tmp_path / "trunc.idx"
    trunc.write_bytes(img_path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_idx(trunc, lab_path)


def test_idx_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    img_path, _ = _write_idx(tmp_path, images, [0, 1, 2])
    _, lab2 = _write_idx(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1], tag="2")
    with pytest.raises(ValueError):
        load_idx(img_path, lab2)


def test_event_vectors_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((7, 4))
    energies = rng.uniform(10.0, 100.0, size=7)
    energies[0], energies[1] = 10.0, 100.0
    path = tmp_path / "events.bin"
    save_event_vectors(path, X, energies)
    ds = load_event_vectors(path, 10.0, 100.0)
    np.testing.assert_allclose(ds.inputs.points, X)
    # affine endpoints of the [0.1, 1.0] label map
    assert ds.labels[0, 0] == pytest.approx(0.1)
    assert ds.labels[1, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(energy_from_label(ds, ds.labels[:, 0]), energies)


def test_event_vectors_validation(tmp_path):
    path = tmp_path / "events.bin"
    save_event_vectors(path, np.zeros((2, 3)), [50.0, 60.0])
    with pytest.raises(ValueError):
        load_event_vectors(path, 55.0, 100.0)  # energy below range
    with pytest.raises(ValueError):
        load_event_vectors(path, 100.0, 10.0)  # inverted range
    (tmp_path / "short.bin").write_bytes(path.read_bytes()[:20])
    with pytest.raises(ValueError):
        load_event_vectors(tmp_path / "short.bin", 10.0, 100.0)


def test_make_synthetic_deterministic():
    arch = ArchitectureConfig(depth=2, input_dim=3, hidden_width=8)
    a = make_synthetic("teacher", 10, 3, seed=5, teacher_arch=arch)
    b = make_synthetic("teacher", 10, 3, seed=5, teacher_arch=arch)
    np.testing.assert_array_equal(a.inputs.points, b.inputs.points)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = make_synthetic("teacher", 10, 3, seed=6, teacher_arch=arch)
    assert not np.array_equal(a.labels, c.labels)


def test_make_synthetic_sinusoid_values():
    ds = make_synthetic("sinusoid", 20, 2, seed=0)
    expected = np.prod(np.sin(np.pi * ds.inputs.points), axis=1)
    np.testing.assert_allclose(ds.labels[:, 0], expected)
    assert np.all(np.abs(ds.inputs.points) <= 1.0)
    with pytest.raises(ValueError):
        make_synthetic("unknown", 10, 2, seed=0)
    with pytest.raises(ValueError):
        make_synthetic("teacher", 10, 2, seed=0)  # missing teacher_arch


def test_dataset_label_validation():
    X = InputSet(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Dataset(inputs=X, labels=np.zeros((4, 1)))
    with pytest.raises(ValueError):
        Dataset(inputs=X, labels=np.array([[np.nan], [0.0], [0.0]]))


# -------------------------------------------------------------- experiment


def _small_plan(tmp_path, **kw):
    defaults = dict(
        sizes=[4, 8, 16],
        arch=ArchitectureConfig(depth=2, input_dim=3),
        output_dir=str(tmp_path / "store"),
        master_seed=3,
        test_size=8,
        val_size=4,
    )
    defaults.update(kw)
    return ExperimentPlan(**defaults)


def _small_dataset(n=40, d=3, seed=2):
    arch = ArchitectureConfig(depth=2, input_dim=d, hidden_width=16)
    return make_synthetic("teacher", n, d, seed=seed, teacher_arch=arch)


def test_run_plan_rows_and_files(tmp_path):
    plan = _small_plan(tmp_path)
    result = run_plan(plan, _small_dataset())
    assert len(result.infwidth_rows) == 3
    for path in ("infwidth.csv", "fits.csv", "flatness.json"):
        assert (tmp_path / "store" / path).exists()
    with open(tmp_path / "store" / "infwidth.csv", newline="") as f:
        recs = list(csv.DictReader(f))
    assert [int(r["N_D"]) for r in recs] == [4, 8, 16]
    assert all(r["series"] == "infinite" for r in recs)
    assert "infinite:mu_L" in result.fits
    assert result.flatness.verdict in ("pass", "fail", "indeterminate")


def test_run_plan_deterministic(tmp_path):
    ds = _small_dataset()
    r1 = run_plan(_small_plan(tmp_path / "a"), ds)
    r2 = run_plan(_small_plan(tmp_path / "b"), ds)
    # the config hash covers output_dir, so compare the value columns only
    strip = lambda rows: [r[:8] + r[9:] for r in rows]
    assert strip(r1.infwidth_rows) == strip(r2.infwidth_rows)


def test_run_plan_lambda_sweep(tmp_path):
    plan = _small_plan(tmp_path, lambda_b_sweep=[0.5, 2.0])
    result = run_plan(plan, _small_dataset())
    assert len(result.infwidth_rows) == 6
    lams = sorted({float(r[2]) for r in result.infwidth_rows})
    assert lams == [0.5, 2.0]


def test_run_plan_bayesian_series(tmp_path):
    plan = _small_plan(tmp_path, bayesian=True)
    result = run_plan(plan, _small_dataset())
    series = {r[0] for r in result.infwidth_rows}
    assert series == {"infinite", "bayesian"}
    assert len(result.infwidth_rows) == 6


def test_run_plan_nested_subsets():
    # training subsets must be nested and the test split identical per size
    from ntkuq.experiment import _splits

    ds = _small_dataset()
    plan = ExperimentPlan(
        sizes=[4, 8, 16],
        arch=ArchitectureConfig(depth=2, input_dim=3),
        output_dir="unused",
        master_seed=3,
        test_size=8,
        val_size=4,
    )
    test_ids, val_ids, pool = _splits(plan, ds)
    assert test_ids.size == 8 and val_ids.size == 4
    np.testing.assert_array_equal(pool[:4], pool[:8][:4])
    all_ids = np.concatenate([test_ids, val_ids, pool])
    assert np.array_equal(np.sort(all_ids), np.arange(ds.count))


def test_run_plan_too_small_dataset(tmp_path):
    plan = _small_plan(tmp_path)
    with pytest.raises(ValueError):
        run_plan(plan, _small_dataset(n=10))


def test_run_plan_with_ensemble(tmp_path):
    from ntkuq.finite_width import TrainConfig

    plan = _small_plan(
        tmp_path,
        sizes=[4, 8],
        ensemble_size=3,
        train_cfg=TrainConfig(eta=0.5, patience=20, max_epochs=50),
        arch=ArchitectureConfig(depth=2, input_dim=3, hidden_width=16),
    )
    result = run_plan(plan, _small_dataset())
    assert len(result.summary_rows) == 2
    with open(tmp_path / "store" / "ensemble.jsonl") as f:
        members = [json.loads(line) for line in f]
    assert len(members) == 6
    assert {m["N_D"] for m in members} == {4, 8}


def test_emit_plot_data(tmp_path):
    from ntkuq.finite_width import TrainConfig

    plan = _small_plan(
        tmp_path,
        sizes=[4, 8, 16],
        ensemble_size=4,
        train_cfg=TrainConfig(eta=0.5, patience=20, max_epochs=50),
        arch=ArchitectureConfig(depth=2, input_dim=3, hidden_width=16),
    )
    run_plan(plan, _small_dataset())
    out = tmp_path / "plot.csv"
    rows = emit_plot_data(str(tmp_path / "store"), "mu_L", out_path=str(out))
    series = sorted({r[3] for r in rows})
    assert series == ["finite", "infinite"]
    # rows sorted by (series, x)
    assert rows == sorted(rows, key=lambda r: (r[3], r[0]))
    finite = [r for r in rows if r[3] == "finite"]
    assert all(r[2] > 0 for r in finite)  # SE of the mean
    infinite = [r for r in rows if r[3] == "infinite"]
    assert all(r[2] == 0.0 for r in infinite)
    with open(out, newline="") as f:
        recs = list(csv.DictReader(f))
    assert len(recs) == len(rows)
    eps_rows = emit_plot_data(str(tmp_path / "store"), "eps_L")
    assert all(np.isfinite(r[1]) for r in eps_rows)
    with pytest.raises(ValueError):
        emit_plot_data(str(tmp_path / "store"), "nonsense")


def test_load_plan_file(tmp_path):
    path = tmp_path / "plan.txt"
    path.write_text(
        "sizes = 8,16,32\n"
        "# a comment\n"
        "depth = 2   # trailing comment\n"
        "master_seed = 7\n"
    )
    raw = load_plan_file(path)
    assert raw == {"sizes": "8,16,32", "depth": "2", "master_seed": "7"}
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign here\n")
    with pytest.raises(ValueError):
        load_plan_file(bad)


def test_plan_validation():
    arch = ArchitectureConfig(depth=2, input_dim=3)
    with pytest.raises(ValueError):
        ExperimentPlan(sizes=[16, 8], arch=arch, output_dir="x")
    with pytest.raises(ValueError):
        ExperimentPlan(sizes=[8, 8], arch=arch, output_dir="x")


# --------------------------------------------------------------------- cli


def test_cli_kernel_build(tmp_path, capsys):
    X = np.random.default_rng(0).standard_normal((6, 3))
    np.save(tmp_path / "x.npy", X)
    out = tmp_path / "kp.bin"
    rc = cli_main(
        [
            "kernel",
            "build",
            "--inputs",
            str(tmp_path / "x.npy"),
            "--out",
            str(out),
            "--depth",
            "2",
        ]
    )
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["count"] == 6 and rec["layer"] == 2
    from ntkuq import load_kernel_pair

    kp = load_kernel_pair(out)
    assert kp.K.shape == (6, 6)


def test_cli_infwidth_predict(tmp_path, capsys):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((10, 3))
    y = rng.standard_normal((8, 1))
    y_test = rng.standard_normal((2, 1))
    np.save(tmp_path / "x.npy", X)
    np.save(tmp_path / "y.npy", y)
    np.save(tmp_path / "yt.npy", y_test)
    rc = cli_main(
        [
            "infwidth",
            "predict",
            "--inputs",
            str(tmp_path / "x.npy"),
            "--labels",
            str(tmp_path / "y.npy"),
            "--n-train",
            "8",
            "--depth",
            "2",
            "--test-labels",
            str(tmp_path / "yt.npy"),
            "--out",
            str(tmp_path / "post.jsonl"),
        ]
    )
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["n_test"] == 2
    assert rec["mu_L"] > 0
    assert (tmp_path / "post.jsonl").exists()


def test_cli_ensemble_run(capsys):
    rc = cli_main(
        [
            "ensemble",
            "run",
            "--n-points",
            "40",
            "--input-dim",
            "3",
            "--depth",
            "2",
            "--width",
            "16",
            "--train-size",
            "8",
            "--val-size",
            "4",
            "--test-size",
            "8",
            "--members",
            "3",
            "--eta",
            "0.5",
            "--patience",
            "20",
            "--max-epochs",
            "50",
        ]
    )
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["n_ok"] == 3
    assert rec["mu_L"] > 0


def test_cli_sweep_fit_emit(tmp_path, capsys):
    plan = tmp_path / "plan.txt"
    plan.write_text(
        "sizes = 4,8,16\n"
        "depth = 2\n"
        "input_dim = 3\n"
        "test_size = 8\n"
        "val_size = 4\n"
        "master_seed = 3\n"
        "n_points = 40\n"
        "output_dir = %s\n" % (tmp_path / "store")
    )
    rc = cli_main(["sweep", "run", "--plan", str(plan)])
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["rows"] == 3
    assert rec["flatness"] in ("pass", "fail", "indeterminate")

    fit_csv = tmp_path / "fitme.csv"
    with open(fit_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["N_D", "value"])
        for n in (10, 100, 1000):
            w.writerow([n, 2.0 * n**-0.5])
    rc = cli_main(["fit", "--input", str(fit_csv)])
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["exponent"] == pytest.approx(-0.5, abs=1e-10)

    rc = cli_main(
        [
            "emit-plot",
            "--store",
            str(tmp_path / "store"),
            "--quantity",
            "mu_L",
            "--out",
            str(tmp_path / "plot.csv"),
        ]
    )
    assert rc == 0
    assert (tmp_path / "plot.csv").exists()


def test_cli_errors_as_json(tmp_path, capsys):
    rc = cli_main(
        [
            "kernel",
            "build",
            "--inputs",
            str(tmp_path / "missing.npy"),
            "--out",
            str(tmp_path / "kp.bin"),
        ]
    )
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "message" in err
