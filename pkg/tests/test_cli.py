import json

import pytest

from evico import cli
from evico.synthdata import DatasetSpec, load_dataset
from evico.trainer import TrainConfig

SMALL = ["--count", "8", "--test-count", "2", "--height", "16", "--width", "16"]


def run(capsys, argv):
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "run.cfg").write_text("")
    cfg, spec = cli.load_config(tmp_path / "run.cfg")
    assert cfg == TrainConfig() and spec == DatasetSpec()


def test_config_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# full-scale settings\nlr0 = 0.1\nbatch.size = 8\nbatch.labeled = 4\n"
                    "loss.uegv = false\nseed = 7\n")
    cfg, spec = cli.load_config(path)
    assert cfg.lr0 == 0.1 and cfg.batch_size == 8 and cfg.labeled_per_batch == 4
    assert not cfg.loss_uegv and cfg.loss_uvge
    assert cfg.seed == spec.seed == 7


@pytest.mark.parametrize("text, lineno", [
    ("lr0 = 0.1\nbogus = 3\n", 2), ("lr0 0.1\n", 1), ("\n\nmax_iterations = x\n", 3),
    ("loss.ce = maybe\n", 1), ("max_iterations = -4\n", None),
])
def test_config_errors(tmp_path, text, lineno):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(path)
    if lineno is not None:
        assert f"bad.cfg:{lineno}:" in str(err.value)


def test_resolved_config_round_trip(tmp_path):
    cfg, spec = cli.build_configs({"lr0": 0.05, "loss.uvge": False, "labeled_fraction": 0.1})
    path = cli.write_resolved(cfg, spec, tmp_path)
    assert cli.load_config(path) == (cfg, spec)


def test_help_lists_defaults_and_loss_formulas(capsys):
    code, out, _ = run(capsys, ["train", "--help"])
    assert code == 0
    out = " ".join(out.split())
    assert "--loss.uegv" in out and "(default: true)" in out and "(default: 3000)" in out
    assert "digamma(S) - digamma(alpha_y)" in out and "|sg(p_e) - p_v|" in out


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, ["train", "--no-such-flag", "1"])
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"


def test_bad_value_is_config_error(capsys):
    code, _, err = run(capsys, ["gen-data", "--labeled-fraction", "2.0"])
    assert code == 3
    line = err.strip()
    assert "\n" not in line and json.loads(line)["error"] == "ConfigError"


def test_end_to_end(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("EVICO_OUT", str(tmp_path / "root"))
    code, out, _ = run(capsys, ["gen-data", "--seed", "7", *SMALL, "--labeled-fraction", "0.25"])
    assert code == 0
    data = tmp_path / "root" / "data"
    assert json.loads(out)["dataset"] == str(data)
    ds = load_dataset(data)
    assert ds.spec.seed == 7 and len(ds.labeled) == 2

    cfg = tmp_path / "run.cfg"
    cfg.write_text("max_iterations = 4\niters_per_epoch = 2\n")
    code, out, _ = run(capsys, ["train", "--config", str(cfg), "--loss.uegv=false",
                                "--data", str(data), "--out", str(tmp_path / "t")])
    assert code == 0
    resolved, _ = cli.load_config(tmp_path / "t" / "config.resolved")
    assert not resolved.loss_uegv and resolved.loss_uvge and resolved.max_iterations == 4
    for name in ("loss_log.csv", "eval_log.csv", "checkpoint.bin", "eval_aggregate.csv"):
        assert (tmp_path / "t" / name).is_file()

    code, out, _ = run(capsys, ["export-maps", "--checkpoint", str(tmp_path / "t" / "checkpoint.bin"),
                                "--data", str(data), "--out", str(tmp_path / "m")])
    assert code == 0 and json.loads(out)["files"] == 6

    code, _, err = run(capsys, ["eval", "--checkpoint", str(tmp_path / "missing.bin"),
                                "--data", str(data)])
    assert code == 4 and json.loads(err)["error"] == "OSError"


def test_eval_matches_evaluate_set(capsys, tmp_path):
    from evico import netmodel as nm
    from evico.metrics import evaluate_set
    from evico.synthdata import generate, save_dataset

    ds = generate(DatasetSpec(count=4, test_count=4, height=16, width=16, labeled_fraction=1.0))
    save_dataset(ds, tmp_path / "d")
    # a model that calls everything foreground keeps every distance defined
    params = nm.init_params(0)
    for name in params:
        if name.startswith(("van2", "evi2")):
            params.arrays[name][:] = 0.0
    params.arrays["van2.b"][:] = [-5.0, 5.0]
    params.arrays["evi2.b"][:] = [-5.0, 5.0]
    nm.save_checkpoint(params, tmp_path / "ck.bin")
    code, out, _ = run(capsys, ["eval", "--checkpoint", str(tmp_path / "ck.bin"),
                                "--data", str(tmp_path / "d"), "--out", str(tmp_path / "e")])
    assert code == 0
    res = evaluate_set(params, ds.test)
    assert json.loads(out)["dice"] == res.dice_pct
    cells = (tmp_path / "e" / "aggregate.csv").read_text().splitlines()[1].split(",")
    assert cells[1] == f"{100 * res.mean.dice:.2f}"
