import json

import numpy as np
import pytest

from dsanet import cli, hsidata, specview
from dsanet import model as net

REPORT_KEYS = {"permutation", "sad_per_em", "rmse_per_em", "sad_avg", "rmse_avg",
               "runtime_s"}


def run(*argv):
    return cli.main([str(a) for a in argv])


def synth_args(out, h=10, w=9, l=16, p=3, seed=5, **extra):
    argv = ["synth", "--h", h, "--w", w, "--l", l, "--p", p,
            "--snr", 30, "--alpha", 0.5, "--seed", seed, "-o", out]
    for key, value in extra.items():
        argv += [f"--{key}", value]
    return argv


@pytest.fixture()
def scene(tmp_path):
    out = tmp_path / "data"
    assert run(*synth_args(out)) == 0
    return out / "synthetic.hsib"


def train_argv(scene, out, epochs=2):
    return ["train", "--data", scene, "-o", out, "--epochs", epochs,
            "--p", 3, "--hidden", 8, "--m", 2, "--n", 2, "--batch", 32,
            "--seed", 3]


# ---------------------------------------------------------------------------
# synth


def test_synth_outputs_load(scene):
    cube, gt = hsidata.load_cube(scene)
    assert (cube.height, cube.width, cube.bands) == (10, 9, 16)
    assert gt is not None and gt.n_endmembers == 3
    assert run("info", scene) == 0


def test_synth_requires_p(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--h", 4, "--w", 4, "--l", 8, "-o", tmp_path)
    assert exc.value.code == 2


def test_synth_requires_dims(tmp_path):
    assert run("synth", "--p", 3, "-o", tmp_path) == 2


def test_synth_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run(*synth_args(a)) == 0
    assert run(*synth_args(b)) == 0
    assert (a / "synthetic.hsib").read_bytes() == (b / "synthetic.hsib").read_bytes()
    assert (a / "synthetic.gt.hsib").read_bytes() == (b / "synthetic.gt.hsib").read_bytes()


# ---------------------------------------------------------------------------
# partition


def test_partition_m1_n1_lists_all_bands(scene, tmp_path):
    out = tmp_path / "part"
    assert run("partition", "--data", scene, "--m", 1, "--n", 1, "-o", out) == 0
    lines = (out / "partition.txt").read_text().splitlines()
    assert lines[0] == "# M=1 N=1 L=16"
    assert lines[1] == ",".join(str(i) for i in range(16))


def test_partition_header_matches_flags(scene, tmp_path):
    out = tmp_path / "part"
    assert run("partition", "--data", scene, "--m", 3, "--n", 4, "-o", out) == 0
    header = (out / "partition.txt").read_text().splitlines()[0]
    assert header == "# M=3 N=4 L=16"


def test_partition_rerun_identical(scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("partition", "--data", scene, "--m", 3, "--n", 2,
                   "--seed", 11, "-o", out) == 0
    assert (a / "partition.txt").read_bytes() == (b / "partition.txt").read_bytes()


# ---------------------------------------------------------------------------
# train


def test_train_epochs_zero_equals_initialization(scene, tmp_path):
    out = tmp_path / "run"
    assert run(*train_argv(scene, out, epochs=0)) == 0
    ckpt = out / "model.dsan"
    loaded = net.load_model(ckpt)
    cube, _ = hsidata.load_cube(scene)
    cube = hsidata.normalize_cube(cube)
    fresh = net.build_model(loaded.config, cube)
    for (name, a, _), (_, b, _) in zip(loaded.parameters(), fresh.parameters()):
        assert np.array_equal(a.data, b.data), name
    assert (out / "history.csv").read_text() == ""


def test_train_history_has_epoch_rows(scene, tmp_path):
    out = tmp_path / "run"
    assert run(*train_argv(scene, out, epochs=3)) == 0
    lines = (out / "history.csv").read_text().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines, start=1):
        epoch, value = line.split(",")
        assert int(epoch) == i
        float(value)


def test_train_rerun_bit_identical_checkpoint(scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(*train_argv(scene, out)) == 0
    assert (a / "model.dsan").read_bytes() == (b / "model.dsan").read_bytes()
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    cfg_a = json.loads((a / "run_config.json").read_text())
    cfg_b = json.loads((b / "run_config.json").read_text())
    assert cfg_a["config_hash"] == cfg_b["config_hash"]


def test_train_accepts_partition_file(scene, tmp_path):
    part_dir = tmp_path / "part"
    assert run("partition", "--data", scene, "--m", 2, "--n", 2, "-o", part_dir) == 0
    out = tmp_path / "run"
    argv = train_argv(scene, out) + ["--partition", part_dir / "partition.txt"]
    assert run(*argv) == 0
    cfg = net.read_checkpoint_config(out / "model.dsan")
    loaded = specview.load_partition(part_dir / "partition.txt")
    for va, vb in zip(cfg.partition.views, loaded.views):
        assert np.array_equal(va, vb)


def test_train_missing_data_flag():
    assert run("train", "-o", "/tmp/nowhere") == 2


def test_train_nonfinite_loss_exit_code(scene, tmp_path):
    out = tmp_path / "run"
    argv = train_argv(scene, out) + ["--lr", 1e280]
    with np.errstate(over="ignore", invalid="ignore"):
        assert run(*argv) == 4


def test_config_file_with_flag_override(scene, tmp_path):
    config = {"epochs": 2, "hidden": 8, "p": 3, "m": 2, "n": 2,
              "batch": 32, "seed": 3, "data": str(scene)}
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(config))
    out = tmp_path / "run"
    assert run("train", "--config", cfg_path, "-o", out, "--epochs", 1) == 0
    echoed = json.loads((out / "run_config.json").read_text())
    assert echoed["epochs"] == 1          # flag wins
    assert echoed["hidden"] == 8          # file value survives
    assert len((out / "history.csv").read_text().splitlines()) == 1


def test_config_file_rejects_unknown_key(scene, tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"banana": 1}))
    assert run("train", "--config", cfg_path, "--data", scene) == 2


def test_backend_flag_is_part_of_the_hash(scene, tmp_path):
    hashes = {}
    for backend in ("numpy", "numba"):
        out = tmp_path / backend
        argv = train_argv(scene, out) + ["--backend", backend]
        assert run(*argv) == 0
        hashes[backend] = json.loads((out / "run_config.json").read_text())[
            "config_hash"
        ]
    assert hashes["numpy"] != hashes["numba"]


# ---------------------------------------------------------------------------
# eval


def eval_argv(scene, out, **extra):
    argv = ["eval", "--data", scene, "-o", out, "--epochs", 2, "--p", 3,
            "--hidden", 8, "--m", 2, "--n", 2, "--batch", 32, "--seed", 3]
    for key, value in extra.items():
        argv += [f"--{key.replace('_', '-')}", value]
    return argv


def test_eval_report_keys_and_determinism(scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(*eval_argv(scene, out)) == 0
    report = json.loads((a / "report.json").read_text())
    assert REPORT_KEYS | {"config_hash", "seed"} == set(report)
    assert len(report["sad_per_em"]) == 3
    # reports agree except for wall-clock runtime
    rb = json.loads((b / "report.json").read_text())
    for key in sorted(REPORT_KEYS | {"config_hash", "seed"} - {"runtime_s"}):
        if key != "runtime_s":
            assert report[key] == rb[key], key
    for name in ("endmembers.csv", "abundance_00.pgm", "abundance_01.pgm",
                 "abundance_02.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_eval_checkpoint_roundtrip(scene, tmp_path):
    train_out = tmp_path / "train"
    assert run(*train_argv(scene, train_out)) == 0
    out = tmp_path / "eval"
    assert run("eval", "--data", scene, "--checkpoint", train_out / "model.dsan",
               "-o", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["sad_avg"] <= 3.2


def test_eval_threads_do_not_change_results(scene, tmp_path):
    train_out = tmp_path / "train"
    assert run(*train_argv(scene, train_out)) == 0
    outs = []
    for threads in (1, 8):
        out = tmp_path / f"eval{threads}"
        assert run("eval", "--data", scene, "--checkpoint",
                   train_out / "model.dsan", "--threads", threads, "-o", out) == 0
        outs.append(out)
    a = json.loads((outs[0] / "report.json").read_text())
    b = json.loads((outs[1] / "report.json").read_text())
    assert a["sad_per_em"] == b["sad_per_em"]
    assert a["rmse_per_em"] == b["rmse_per_em"]
    for p in range(3):
        assert (outs[0] / f"abundance_{p:02d}.pgm").read_bytes() == (
            outs[1] / f"abundance_{p:02d}.pgm"
        ).read_bytes()


def test_eval_repeats_mean_matches_single_runs(scene, tmp_path):
    singles = []
    for r in range(2):
        out = tmp_path / f"single{r}"
        assert run(*eval_argv(scene, out, seed=7 + r)) == 0
        singles.append(json.loads((out / "report.json").read_text()))
    out = tmp_path / "repeats"
    assert run(*eval_argv(scene, out, seed=7, repeats=2)) == 0
    agg = json.loads((out / "report.json").read_text())
    assert agg["repeats"] == 2
    expected = (singles[0]["sad_avg"] + singles[1]["sad_avg"]) / 2.0
    assert agg["sad_avg_mean"] == pytest.approx(expected, abs=1e-12)
    expected_rmse = (singles[0]["rmse_avg"] + singles[1]["rmse_avg"]) / 2.0
    assert agg["rmse_avg_mean"] == pytest.approx(expected_rmse, abs=1e-12)
    for r in range(2):
        per = json.loads((out / f"report_seed{7 + r}.json").read_text())
        assert per["sad_per_em"] == singles[r]["sad_per_em"]


def test_eval_requires_ground_truth(tmp_path):
    rng = np.random.default_rng(0)
    cube = hsidata.HSICube(4, 4, 6, rng.uniform(0.1, 1.0, (4, 4, 6)))
    path = tmp_path / "plain.hsib"
    hsidata.save_cube(cube, path)
    assert run("eval", "--data", path, "-o", tmp_path / "out", "--epochs", 1) == 2


# ---------------------------------------------------------------------------
# info


def test_info_prints_cube_dims(tmp_path, capsys):
    rng = np.random.default_rng(1)
    cube = hsidata.HSICube(5, 4, 3, rng.uniform(0.0, 1.0, (5, 4, 3)))
    path = tmp_path / "cube.hsib"
    hsidata.save_cube(cube, path)
    assert run("info", path) == 0
    out = capsys.readouterr().out
    assert "H=5" in out and "W=4" in out and "L=3" in out


def test_info_checkpoint_fields(scene, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(*train_argv(scene, out)) == 0
    capsys.readouterr()
    assert run("info", out / "model.dsan") == 0
    text = capsys.readouterr().out
    assert "P=3" in text and "k=3" in text and "D=8" in text and "N=2" in text


def test_info_gt_sidecar(scene, capsys):
    assert run("info", hsidata.gt_path(scene)) == 0
    out = capsys.readouterr().out
    assert "P=3" in out and "L=16" in out and "H=10" in out and "W=9" in out


def test_info_corrupt_magic_exit_3(tmp_path, capsys):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"JUNKJUNKJUNK")
    assert run("info", path) == 3
    assert "at byte 0" in capsys.readouterr().err


def test_info_missing_file(tmp_path):
    assert run("info", tmp_path / "absent.hsib") == 3


def test_corrupt_cube_data_exit_3(scene, tmp_path, capsys):
    raw = bytearray(scene.read_bytes())
    raw[:4] = b"XXXX"
    bad = tmp_path / "bad.hsib"
    bad.write_bytes(bytes(raw))
    assert run("train", "--data", bad, "-o", tmp_path / "out") == 3
