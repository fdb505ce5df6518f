import filecmp
import os
import shutil

import pytest
import yaml

from cjt import cli
from cjt.pipeline import PRESETS, ConfigError, ExperimentConfig, preset_config


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert cli.main(["--preset", "tiny", "--out", str(out), "run"]) == 0
    return out


def test_artifact_tree(tiny_run):
    for sub in ("manifests", "pairs", "checkpoints", "logs", "reports", "markers"):
        assert (tiny_run / sub).is_dir(), sub
    assert (tiny_run / "reports" / "summary.tsv").read_text().startswith("method\tdev_clean")
    stamps = (tiny_run / "stamps.tsv").read_text().splitlines()
    cfg = ExperimentConfig.parse((tiny_run / "config.yaml").read_text())
    stamped = {ln.split("\t")[0] for ln in stamps[1:]}
    assert all(ln.split("\t")[1:3] == [cfg.hash, "0"] for ln in stamps[1:])
    for f in ("checkpoints/cjt-round2.ckpt", "reports/test_clean.jsonl", "pairs/speech-psel.tsv",
              "manifests/paired.tsv", "logs/teacher.jsonl"):
        assert f in stamped


def test_rerun_does_no_work(tiny_run, capsys):
    before = {p: p.stat().st_mtime_ns for p in (tiny_run / "checkpoints").iterdir()}
    assert cli.main(["--preset", "tiny", "--out", str(tiny_run), "run"]) == 0
    assert "nothing (all stages complete)" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in (tiny_run / "checkpoints").iterdir()} == before


def test_same_seed_gives_identical_reports(tiny_run, tmp_path):
    out = tmp_path / "b"
    assert cli.main(["run", "--preset", "tiny", "--out", str(out)]) == 0
    cmp = filecmp.dircmp(tiny_run / "reports", out / "reports")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_missing_dependency_exit_code(tmp_path, capsys):
    assert cli.main(["--preset", "tiny", "--out", str(tmp_path), "pseudolabel"]) == 3
    assert "cjt train --stage teacher" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  mask_prob: 1.5\n")
    assert cli.main(["--preset", "tiny", "--config", str(bad), "--out", str(tmp_path / "o"), "gen-data"]) == 2
    bad.write_text("nonsense: 1\n")
    assert cli.main(["--config", str(bad), "--out", str(tmp_path / "o"), "gen-data"]) == 2
    assert cli.main(["--out", str(tmp_path / "o"), "run", "--stages", "gen-data,fly"]) == 2


def test_numerical_fault_exit_code(tmp_path, monkeypatch):
    from cjt.numerics import NumericalFault

    def boom(ws):
        raise NumericalFault("nan")
    monkeypatch.setitem(cli.STAGE_FUNCS, "gen-data", boom)
    assert cli.main(["--preset", "tiny", "--out", str(tmp_path), "gen-data"]) == 4


def test_lock_blocks_concurrent_runs(tmp_path):
    (tmp_path / ".lock").write_text("123")
    assert cli.main(["--preset", "tiny", "--out", str(tmp_path), "gen-data"]) == 2


def test_force_reruns(tmp_path):
    args = ["--preset", "tiny", "--out", str(tmp_path)]
    assert cli.main(args + ["gen-data"]) == 0
    ws = cli.Workspace(str(tmp_path), cli.resolve_config(cli.build_parser().parse_args(args + ["gen-data"])))
    assert cli.run_stages(ws, ["gen-data"]) == []
    assert cli.run_stages(ws, ["gen-data"], force=True) == ["gen-data"]


def test_paper_defaults_preset():
    cfg = preset_config("paper-defaults")
    assert cfg.train.lambda_ratio == 3 and cfg.train.mask_prob == 0.4
    assert cfg.train.mask_strategy == "thres" and cfg.train.syngr_prob == 0.7
    assert cfg.pipeline.lm_weight == 0.4 and cfg.pipeline.beam == 20


def test_preset_sizes():
    assert PRESETS["tiny"]["data.paired_n"] == 50
    assert PRESETS["small"]["data.paired_n"] == 200
    assert PRESETS["medium"]["data.paired_n"] == 1000
    with pytest.raises(ConfigError):
        preset_config("huge")


FLAG_VALUES = {"teacher_updates": 7, "lm_updates": 7, "round1_updates": 7, "round2_updates": 7,
               "lambda_ratio": 2, "peak_lr": 0.002, "mask_strategy": "rand", "mask_prob": 0.3,
               "syngr_prob": 0.5, "syngr_scope": "all", "round2_init": "scratch", "pl_beam": 3,
               "pl_lm_weight": 0.2, "synth_fraction": 0.5, "beam": 3, "lm_weight": 0.2,
               "probe_frames": 123, "hist_bins": 9}
FLAG_COMMAND = {"pl_beam": "pseudolabel", "pl_lm_weight": "pseudolabel", "synth_fraction": "synthesize",
                "beam": "decode", "lm_weight": "decode", "probe_frames": "analyze", "hist_bins": "analyze"}


def _get(cfg, key):
    node = cfg.to_dict()
    for part in key.split("."):
        node = node[part]
    return node


@pytest.mark.parametrize("flag", sorted(cli.FLAG_KEYS))
def test_each_flag_sets_exactly_one_key(flag, tmp_path):
    base = cli.resolve_config(cli.build_parser().parse_args(["--preset", "tiny", "gen-data"]))
    cmd = FLAG_COMMAND.get(flag, "train")
    argv = ["--preset", "tiny", cmd, "--" + flag.replace("_", "-"), str(FLAG_VALUES[flag])]
    if cmd == "train":
        argv += ["--stage", "teacher"]
    cfg = cli.resolve_config(cli.build_parser().parse_args(argv))
    changed = [k for k in _flat(base.to_dict()) if _flat(base.to_dict())[k] != _flat(cfg.to_dict())[k]]
    assert changed == [cli.FLAG_KEYS[flag]]
    assert _get(cfg, cli.FLAG_KEYS[flag]) == FLAG_VALUES[flag]


def _flat(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def test_flags_override_file_values(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"train": {"mask_prob": 0.2, "lambda_ratio": 1}, "seed": 4}))
    args = cli.build_parser().parse_args(["--config", str(f), "train", "--stage", "round2", "--mask-prob", "0.3"])
    cfg = cli.resolve_config(args)
    assert cfg.train.mask_prob == 0.3 and cfg.train.lambda_ratio == 1 and cfg.seed == 4


def test_global_flags_before_and_after_subcommand():
    p = cli.build_parser()
    assert p.parse_args(["--preset", "tiny", "--seed", "3", "gen-data"]).preset == "tiny"
    a = p.parse_args(["gen-data", "--preset", "tiny", "--seed", "3"])
    assert a.preset == "tiny" and a.seed == 3


def test_config_yaml_round_trip():
    cfg = preset_config("small", seed=5)
    assert ExperimentConfig.parse(cfg.dump()) == cfg
    assert ExperimentConfig.parse(cfg.dump()).hash == cfg.hash


def test_compare_tables(tiny_run, tmp_path, capsys):
    one = cli.compare([str(tiny_run)], ["cjt"])
    assert len(one.splitlines()) == 2
    twin = tmp_path / "twin"
    shutil.copytree(tiny_run / "reports", twin / "reports")
    rows = cli.compare([str(tiny_run), str(twin)], ["a", "b"]).splitlines()
    assert rows[1].split("\t")[1:] == rows[2].split("\t")[1:]
    assert cli.main(["compare", str(tiny_run), str(twin), "--names", "a,b"]) == 0
    assert capsys.readouterr().out.count("\n") == 3


def test_compare_rejects_mismatched_eval_sets(tiny_run, tmp_path):
    other = tmp_path / "other" / "reports"
    other.mkdir(parents=True)
    lines = (tiny_run / "reports" / "test_clean.jsonl").read_text().splitlines()
    (other / "test_clean.jsonl").write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(ConfigError):
        cli.compare([str(tiny_run), str(other.parent)])


def test_inspect(tiny_run, capsys):
    assert cli.main(["inspect", str(tiny_run / "checkpoints" / "teacher.ckpt")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("kind=asr round=teacher") and "total\t" in out
    assert cli.main(["inspect", str(tiny_run / "pairs" / "speech-psel-conf.tsv")]) == 0
    assert "provenance=speech-PseL" in capsys.readouterr().out
    assert cli.main(["inspect", os.path.join(tiny_run, "manifests", "paired.tsv")]) == 0
    assert capsys.readouterr().out == "records=50 provenance=gold\n"
