import csv
import json
import subprocess
import sys

import pytest

from fewstep.cli import dispatch
from fewstep.core import Schedule

SMALL = {"run": {"stage1_iters": 3, "batch_size": 32}, "eval_count": 64}
SMALL_MLP = {
    "denoiser": {"kind": "trainable-mlp", "mlp": {"hidden": [8]}, "pretrain_iters": 20},
    "run": {"stage1_iters": 1, "stage2_iters": 3, "batch_size": 32},
}


def _config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _run(capsys, argv):
    code = dispatch(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return code, (out[-1] if out else None)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_run_is_byte_identical_for_fixed_seed(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL)
    code_a, dir_a = _run(capsys, ["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "o")])
    code_b, dir_b = _run(capsys, ["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "o")])
    assert code_a == code_b == 0 and dir_a != dir_b
    for name in ("loss_history.csv", "schedule.json", "weights.csv"):
        assert (tmp_path / dir_a / name).read_bytes() == (tmp_path / dir_b / name).read_bytes()
    echo = json.loads((tmp_path / dir_a / "config.json").read_text())
    assert echo["run"]["seed"] == 7 and echo["command"] == "run"


def test_optimize_writes_schedule(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL)
    code, d = _run(capsys, ["optimize", "--config", cfg, "--n-steps", "5", "--out", str(tmp_path)])
    assert code == 0
    s = Schedule.load(tmp_path / d / "schedule.json")
    assert s.n_steps == 5 and s.sigma_max == 80.0 and s.sigma_min == 0.002
    hist = _rows(tmp_path / d / "loss_history.csv")
    assert hist[0][:7] == ["stage", "outer", "iter", "level", "disc_loss", "diff_loss", "stderr"]
    assert len(hist) == 1 + 3 * 4


def test_eval_two_schedules(tmp_path, capsys):
    from fewstep.core import NoiseRange, rho_schedule, uniform_schedule

    rho_schedule(NoiseRange(), 5).save(tmp_path / "rho.json")
    uniform_schedule(NoiseRange(), 5).save(tmp_path / "uni.json")
    scheds = f"{tmp_path / 'rho.json'},{tmp_path / 'uni.json'}"
    code, d = _run(capsys, ["eval", "--schedules", scheds, "--count", "64", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / d / "eval.csv")
    assert rows[0] == ["schedule_id", "n_steps", "metric", "value", "stderr", "seed"]
    assert {r[0] for r in rows[1:]} == {"rho", "uni"}
    assert {r[2] for r in rows[1:]} == {"global_error", "energy_distance", "sliced_wasserstein"}


def test_sample_gen_data_and_export(tmp_path, capsys):
    code, d = _run(capsys, ["sample", "--count", "3", "--n-steps", "4", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / d / "trajectories.csv")
    assert rows[0] == ["seed", "step", "sigma", "x0", "x1", "d0", "d1"] and len(rows) == 1 + 12
    code, d = _run(capsys, ["gen-data", "--count", "10", "--out", str(tmp_path)])
    assert code == 0 and len(_rows(tmp_path / d / "data.csv")) == 11
    code, d = _run(capsys, ["export-weights", "--n-steps", "6", "--out", str(tmp_path)])
    rows = _rows(tmp_path / d / "weights.csv")
    assert code == 0 and rows[0] == ["t", "sigma", "lambda", "active_weight"] and len(rows) == 6


def test_finetune_and_reuse_params(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL_MLP)
    code, d = _run(capsys, ["finetune", "--config", cfg, "--n-steps", "4", "--out", str(tmp_path)])
    assert code == 0
    blob = tmp_path / d / "denoiser.bin"
    assert blob.exists() and (tmp_path / d / "denoiser.bin.json").exists()
    code, d2 = _run(capsys, ["sample", "--params", str(blob), "--count", "2", "--out", str(tmp_path)])
    assert code == 0


def test_run_with_mlp(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL_MLP)
    code, d = _run(capsys, ["run", "--config", cfg, "--n-steps", "4", "--out", str(tmp_path)])
    assert code == 0 and (tmp_path / d / "denoiser.bin").exists()
    stages = {r[0] for r in _rows(tmp_path / d / "loss_history.csv")[1:]}
    assert stages == {"0", "1", "2"}


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"run": {"gamma": -1}},
        {"run": {"learning_rate": 1}},
        {"schedule": {"n_steps": 1}},
        {"schedule": {"sigma_min": 5.0, "sigma_max": 1.0}},
        {"format_version": 2},
        {"denoiser": {"kind": "transformer"}},
    ],
)
def test_invalid_configs_exit_1(tmp_path, capsys, doc):
    code, _ = _run(capsys, ["optimize", "--config", _config(tmp_path, doc), "--out", str(tmp_path)])
    assert code == 1
    assert not any(tmp_path.glob("optimize-*"))


def test_flag_validation_exit_1(tmp_path, capsys):
    assert dispatch(["optimize", "--format-version", "9", "--out", str(tmp_path)]) == 1
    assert dispatch(["optimize", "--n-steps", "1", "--out", str(tmp_path)]) == 1
    assert dispatch(["finetune", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as info:
        dispatch(["frobnicate"])
    assert info.value.code == 1


def test_nonfinite_run_exits_2_with_dump(tmp_path, capsys, monkeypatch):
    import fewstep.cli as cli

    def boom(*a, **k):
        from fewstep.sched_opt import NonFiniteError

        raise NonFiniteError("non-finite disc loss", {"v": [float("nan")]})

    monkeypatch.setattr(cli, "run_stage1", boom)
    code, _ = _run(capsys, ["optimize", "--out", str(tmp_path)])
    assert code == 2
    dumps = list(tmp_path.glob("optimize-*/failure_dump.json"))
    assert len(dumps) == 1 and "v" in json.loads(dumps[0].read_text())


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fewstep", "export-weights", "--n-steps", "3", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "fewstep", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
