import csv

import numpy as np
import pytest

from anodev2.cli import main, moments, read_pgm
from anodev2.data import to_binary, synthetic_blobs


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def col(rows, name):
    return np.array([float(r[name]) for r in rows])


def simulate(tmp_path, *flags):
    out = tmp_path / "sim"
    assert main(["simulate", "--grid", "64", "--steps", "5", "--dt", "0.1", "--out", str(out), *flags]) == 0
    return out, read_csv(out / "moments.csv")


def test_simulate_writes_frames(tmp_path):
    out, rows = simulate(tmp_path, "--d", "0.001")
    assert len(rows) == 6
    frames = read_csv(out / "frames.csv")
    assert [f["file"] for f in frames] == [f"frame_{i:03d}.pgm" for i in range(6)]
    img = read_pgm(out / "frame_000.pgm")
    assert img.shape == (64, 64) and img.max() == 255 and img.min() == 0


def test_simulate_diffusion_variance_growth(tmp_path):
    _, rows = simulate(tmp_path, "--d", "0.001")
    np.testing.assert_allclose(np.diff(col(rows, "variance")), 2 * 0.001 * 0.1, rtol=1e-2)


def test_simulate_advection_drift(tmp_path):
    _, rows = simulate(tmp_path, "--vx", "0.3", "--vy", "-0.2")
    # patterns travel towards -v
    np.testing.assert_allclose(np.diff(col(rows, "mean_x")), -0.03, atol=1e-9)
    np.testing.assert_allclose(np.diff(col(rows, "mean_y")), 0.02, atol=1e-9)
    var = col(rows, "variance")
    np.testing.assert_allclose(var, var[0], rtol=1e-2)


def test_simulate_reaction_growth(tmp_path):
    _, rows = simulate(tmp_path, "--rho", "0.5")
    s = col(rows, "sum")
    np.testing.assert_allclose(s[1:] / s[:-1], np.exp(0.05), rtol=1e-12)


def test_simulate_from_file_and_tanh(tmp_path):
    np.save(tmp_path / "w.npy", np.eye(8))
    out = tmp_path / "o"
    assert main(["simulate", "--grid", "8", "--init", str(tmp_path / "w.npy"), "--sigma", "tanh", "--steps", "1",
                 "--out", str(out)]) == 0
    assert len(read_csv(out / "frames.csv")) == 2


def test_moments_of_point_mass():
    g = np.zeros((4, 4))
    g[1, 2] = 3.0
    assert moments(g) == pytest.approx((3.0, 0.5, 0.25, 0.0))


@pytest.mark.parametrize("argv", [["simulate", "--grid", "x", "--out", "o"], ["simulate"], ["nope"]])
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_unwritable_out_and_bad_init(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--out", str(blocker / "sub")]) == 2
    assert main(["simulate", "--init", "square:3", "--out", str(tmp_path / "o")]) == 2


def test_grad_check_tiny_resnet_config1(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["grad-check", "--model", "tiny-resnet4", "--config", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["index", "dto", "kkt", "fd", "relerr_dto_fd", "relerr_kkt_fd"]


def test_grad_check_absurd_eps_fails(capsys):
    assert main(["grad-check", "--model", "scalar-system", "--eps", "10"]) == 1
    assert "FAIL" in capsys.readouterr().err


def test_grad_check_scalar_system_fine_grid(capsys):
    assert main(["grad-check", "--model", "scalar-system", "--nt", "8192"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 2 and rows[0]["kkt"]


@pytest.mark.parametrize("arch,variant,total", [("alexnet", "baseline", 1_756_682), ("resnet4", "baseline", 7_706),
                                                ("resnet10", "baseline", 44_186)])
def test_count_params_baselines(arch, variant, total, capsys, tmp_path):
    assert main(["count-params", "--arch", arch, "--variant", variant, "--csv", str(tmp_path / "p.csv")]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == f"total,{total}"
    assert read_csv(tmp_path / "p.csv")[-1] == {"layer": "total", "count": str(total)}


def test_count_params_variant_overhead(capsys):
    assert main(["count-params", "--arch", "resnet10", "--variant", "anodev2_c1"]) == 0
    total = int(capsys.readouterr().out.splitlines()[-1].split(",")[1])
    assert total / 44_186 - 1 <= 0.067


def test_eval_untrained_is_chance(capsys):
    # the blob test set has only ten prototypes, so one model's accuracy is
    # coarse; the mean over seeded initializations is the chance estimate
    accs = []
    for seed in range(8):
        assert main(["eval", "--synthetic", "500", "--arch", "resnet4", "--seed", str(seed)]) == 0
        accs.append(float(capsys.readouterr().out.split()[1]))
    assert abs(np.mean(accs) - 0.1) <= 0.03


def test_missing_data_dir_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert main(["eval", "--data", str(tmp_path)]) == 2


def test_train_and_eval_on_cifar_layout(tmp_path):
    data = tmp_path / "cifar"
    data.mkdir()
    (data / "data_batch_1.bin").write_bytes(to_binary(synthetic_blobs(40, seed=0, noise=0.3)))
    (data / "test_batch.bin").write_bytes(to_binary(synthetic_blobs(20, seed=1, noise=0.3)))
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--epochs", "1", "--batch-size", "20", "--precision", "float64",
                 "--variant", "anodev2_c2", "--out", str(out)]) == 0
    hist = read_csv(out / "history.csv")
    assert len(hist) == 1 and 0 <= float(hist[0]["test_acc"]) <= 1
    assert main(["eval", "--data", str(data), "--checkpoint", str(out / "final.anv2"), "--out", str(out)]) == 0
    row = read_csv(out / "eval.csv")[0]
    assert float(row["accuracy"]) == pytest.approx(float(hist[0]["test_acc"]))
