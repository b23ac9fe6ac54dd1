import json

import pytest

from qflrl import cli, experiments
from qflrl.experiments import REGISTRY, ConfigError, build_params, flatten


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_list_experiments(capsys):
    code, out, _ = run(["list-experiments"], capsys)
    assert code == 0
    tags = [line.split()[0] for line in out.strip().splitlines()]
    assert tags == ["gradcheck", "xor", "func1d", "autoenc-pca", "denoise", "walker", "walker-target",
                    "gridworld-q", "cavity", "rbm", "qbm", "reconstruct"]


def test_every_experiment_has_valid_defaults():
    for tag, exp in REGISTRY.items():
        params, applied = build_params(exp.params, {})
        assert applied == list(flatten(params))
        assert not (exp.check(params) if exp.check else []), tag


def test_strict_keys_and_types():
    with pytest.raises(ConfigError, match="unknown key"):
        build_params(experiments.WalkerParams, {"etaa": 0.1})
    with pytest.raises(ConfigError, match="integer"):
        build_params(experiments.WalkerParams, {"T": 2.5})
    p, applied = build_params(experiments.CavityParams, {"sme.kappa": 2, "hidden": [16]})
    assert p.sme.kappa == 2.0 and isinstance(p.sme.kappa, float) and p.hidden == (16,)
    assert "sme.kappa" not in applied and "sme.dt" in applied


def test_override_parsing():
    assert cli.parse_overrides(["--a.b=1", "--c", "x y", "--d=[1, 2]", "--e=true"]) == \
        {"a.b": 1, "c": "x y", "d": [1, 2], "e": True}
    with pytest.raises(ConfigError):
        cli.parse_overrides(["stray"])


def test_validate_empty_config_echoes_all_defaults(tmp_path, capsys):
    cfg = tmp_path / "empty.toml"
    cfg.write_text("")
    code, out, _ = run(["validate", str(cfg)], capsys)
    report = json.loads(out)
    assert code == 0 and report["valid"]
    assert [r["experiment"] for r in report["experiments"]] == list(REGISTRY)
    cav = report["experiments"][8]
    assert cav["defaults_applied"]["sme.substeps"] == 200


def test_validate_names_violations(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('experiment = "cavity"\npolicy_sizes = [5, 64, 9]\n[sme]\nsubsteps = 20\n')
    code, out, _ = run(["validate", str(cfg)], capsys)
    report = json.loads(out)
    assert code == 1 and not report["valid"]
    assert any("stability" in v for v in report["violations"])
    assert "policy_sizes" not in report["defaults_applied"]
    code, out, _ = run(["validate", "cavity", "--policy_sizes=[5, 64, 9]"], capsys)
    assert code == 1 and any("t_msmt" in v for v in json.loads(out)["violations"])
    code, out, _ = run(["validate", "gridworld-q", "--start=[9, 9]"], capsys)
    assert code == 1 and any("outside" in v for v in json.loads(out)["violations"])


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(["run", "walker", "--bogus=1", "--out-dir", str(tmp_path / "o")], capsys)
    assert code == 2
    rec = json.loads(err)
    assert rec["kind"] == "config" and "bogus" in rec["message"]
    bad = tmp_path / "broken.toml"
    bad.write_text("experiment = \n")
    assert run(["run", str(bad)], capsys)[0] == 2
    assert run(["run", "no-such-experiment"], capsys)[0] == 2
    assert run(["run", "cavity", "--sme.substeps=10", "--out-dir", str(tmp_path / "c")], capsys)[0] == 2


def test_numerical_abort_exit_3(tmp_path, capsys, monkeypatch):
    def boom(p, seed, pool_map=map):
        raise FloatingPointError("trace collapsed")
    monkeypatch.setattr(REGISTRY["xor"], "run", boom)
    code, _, err = run(["run", "xor", "--out-dir", str(tmp_path)], capsys)
    assert code == 3
    rec = json.loads((tmp_path / "error.json").read_text())
    assert rec["kind"] == "numerical" and rec["diagnostics"]["exception"] == "FloatingPointError"


def test_run_from_config_file_writes_outputs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("QFLRL_THREADS", "2")
    cfg = tmp_path / "w.toml"
    cfg.write_text(f'experiment = "walker"\nseed = 4\nout_dir = "{tmp_path / "out"}"\nupdates = 30\n')
    code, out, _ = run(["run", str(cfg), "--eta=0.05"], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["format_version"] == cli.FORMAT_VERSION
    assert summary["config"]["eta"] == 0.05 and summary["config"]["updates"] == 30
    assert summary["seed"] == 4 and summary["threads"] == 2
    assert "T" in summary["defaults_applied"] and "eta" not in summary["defaults_applied"]
    assert summary["wall_clock_seconds"] >= 0
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("step,mean_return,grad_norm")
    assert len(lines) == 31
    ck = json.loads((tmp_path / "out" / "checkpoint.json").read_text())
    assert ck["experiment"] == "walker"


@pytest.mark.parametrize("tag,extra", [("walker", ["--updates=50"]), ("xor", ["--steps=200"]),
                                       ("gridworld-q", ["--q.episodes=300"]),
                                       ("cavity", ["--updates=2", "--batch_size=3", "--T=4",
                                                   "--eval_batch=3", "--dump_trajectories=2"])])
def test_rerun_is_byte_identical(tmp_path, capsys, tag, extra):
    outs = []
    for k, threads in enumerate(("1", "3")):
        d = tmp_path / f"r{k}"
        assert run(["run", tag, "--seed", "11", "--out-dir", str(d), "--threads", threads] + extra, capsys)[0] == 0
        outs.append(d)
    for name in ("metrics.csv", "checkpoint.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    if tag == "cavity":
        assert (outs[0] / "trajectories.csv").read_bytes() == (outs[1] / "trajectories.csv").read_bytes()
        s = json.loads((outs[0] / "summary.json").read_text())
        assert {"baseline_best_constant_drive", "coherent_ceiling"} <= set(s["metrics"])


def test_denoise_writes_pgm_dumps(tmp_path, capsys):
    code, _, _ = run(["run", "denoise", "--steps=5", "--test_size=8", "--log_every=5",
                      "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "example0_denoised.pgm").read_text().startswith("P2\n16 16\n255\n")


def test_gradcheck_run(tmp_path, capsys):
    code, out, _ = run(["run", "gradcheck", "--seed", "1", "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["metrics"]["max_rel_error"] < 1e-5


def test_bad_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("QFLRL_THREADS", "many")
    assert run(["run", "xor", "--out-dir", str(tmp_path)], capsys)[0] == 2
