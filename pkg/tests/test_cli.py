import filecmp
import json

import pytest

from mbe.cli import load_model, run
from mbe.config import ConfigError, RunConfig, load_config, parse_config

FAST = {"seed": 2, "planted": {"n_entities": 50, "n_new": 6, "n_noise": 10},
        "train": {"dim": 6, "gcn_layers": 1, "lstm_layers": 1, "epochs": 2, "batch_size": 32,
                  "beam_size": 8, "rollouts_per_query": 2},
        "eval": {"beam_size": 8}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(FAST))
    assert run(["make-planted", "--out", str(d / "data"), "--config", str(d / "cfg.json")]) == 0
    assert run(["train", "--data", str(d / "data"), "--config", str(d / "cfg.json"),
                "--out", str(d / "model" / "m.ckpt"), "--log", str(d / "train.log")]) == 0
    return d


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"bogus": 1})
    with pytest.raises(ConfigError):
        parse_config({"train": {"lerning_rate": 0.1}})
    with pytest.raises(ConfigError):
        parse_config({"train": {"rng_seed": 3}})
    with pytest.raises(ConfigError):
        parse_config({"schema_version": 99})
    with pytest.raises(ConfigError):
        parse_config({"train": {"max_steps": 9}})
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_seed_reaches_every_section():
    cfg = parse_config({"seed": 17})
    assert cfg.build.rng_seed == cfg.planted.seed == cfg.train.rng_seed == 17
    assert parse_config(json.loads(cfg.dumps())) == cfg
    assert load_config(None) == RunConfig().resolved()


def test_exit_codes(tmp_path, workdir, capsys):
    assert run([]) == 1
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 1
    assert run(["nosuch"]) == 1
    (tmp_path / "bad.json").write_text('{"train": {"nope": 1}}')
    assert run(["make-planted", "--out", str(tmp_path / "p"), "--config", str(tmp_path / "bad.json")]) == 1
    bad = tmp_path / "bad"
    (bad / "batch_1").mkdir(parents=True)
    (bad / "train.txt").write_text("a\tr\tb\n")
    (bad / "batch_1" / "support.txt").write_text("c\tr\ta\n")
    (bad / "batch_1" / "test.txt").write_text("d\tr\ta\n")
    assert run(["validate", "--data", str(bad)]) == 2
    assert "support coverage" in capsys.readouterr().out
    assert run(["validate", "--data", str(workdir / "data")]) == 0
    assert run(["evaluate", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(workdir / "data")]) == 2
    assert run(["evaluate", "--ckpt", str(workdir / "model" / "m.ckpt"), "--data", str(workdir / "data"),
                "--batch", "5"]) == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_exit_code(tmp_path, workdir):
    cfg = dict(FAST, train=dict(FAST["train"], lr=1e300))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = run(["train", "--data", str(workdir / "data"), "--config", str(tmp_path / "c.json"),
                "--out", str(tmp_path / "m.ckpt")])
    assert code == 3


def test_train_log_and_checkpoint(workdir):
    events = [json.loads(line) for line in (workdir / "train.log").read_text().splitlines()]
    assert [e["event"] for e in events] == ["epoch", "epoch", "done"]
    params, tcfg, meta, rules = load_model(workdir / "model" / "m.ckpt")
    assert tcfg.dim == 6 and meta["relations"] == ["r1", "r2", "rq", "r3"]
    assert (workdir / "model" / "config_used.json").is_file()


def test_answer_prints_scores_and_trajectories(workdir, capsys):
    code = run(["answer", "--ckpt", str(workdir / "model" / "m.ckpt"), "--data", str(workdir / "data"),
                "--batch", "1", "--query", "e044\trq", "--beam", "8", "--show-trajectories", "2", "--top", "3"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert any("score=" in ln and "→" in ln for ln in lines)
    assert run(["answer", "--ckpt", str(workdir / "model" / "m.ckpt"), "--data", str(workdir / "data"),
                "--query", "nobody\trq"]) == 2
    assert run(["answer", "--ckpt", str(workdir / "model" / "m.ckpt"), "--data", str(workdir / "data"),
                "--query", "e044"]) == 1


def test_evaluate_is_reproducible_from_config_used(workdir, tmp_path):
    ckpt, data = str(workdir / "model" / "m.ckpt"), str(workdir / "data")
    assert run(["evaluate", "--ckpt", ckpt, "--data", data, "--config", str(workdir / "cfg.json"),
                "--setting", "sample100", "--out", str(tmp_path / "a" / "r.json")]) == 0
    assert run(["evaluate", "--ckpt", ckpt, "--data", data, "--config", str(tmp_path / "a" / "config_used.json"),
                "--out", str(tmp_path / "b" / "r.json")]) == 0
    assert filecmp.cmp(tmp_path / "a" / "r.json", tmp_path / "b" / "r.json", shallow=False)
    report = json.loads((tmp_path / "a" / "r.json").read_text())
    assert report["setting"] == "sample100" and len(report["checkpoint_sha256"]) == 64


def test_build_and_validate_reproducible(tmp_path):
    src = tmp_path / "src.tsv"
    rows = [f"n{i}\tr{i % 3}\tn{(i * 7 + 1) % 60}" for i in range(60)]
    rows += [f"n{i}\tr{(i + 1) % 3}\tn{(i + 1) % 60}" for i in range(60)]
    src.write_text("\n".join(rows) + "\n")
    assert run(["build-dataset", "--input", str(src), "--out", str(tmp_path / "a"),
                "--seeds", "2", "--keep-prob", "0.5", "--batches", "3", "--seed", "9"]) == 0
    assert run(["build-dataset", "--source", str(src), "--out", str(tmp_path / "b"),
                "--config", str(tmp_path / "a" / "config_used.json")]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert run(["validate", "--data", str(tmp_path / "a")]) == 0
    assert run(["build-dataset", "--input", str(src), "--out", str(tmp_path / "c"), "--keep-prob", "2"]) == 1


def test_train_is_reproducible_from_config_used(workdir, tmp_path):
    assert run(["train", "--data", str(workdir / "data"), "--config", str(workdir / "model" / "config_used.json"),
                "--out", str(tmp_path / "m.ckpt"), "--log", str(tmp_path / "log")]) == 0
    strip = lambda p: [{k: v for k, v in json.loads(x).items() if k != "seconds"}  # noqa: E731
                       for x in p.read_text().splitlines()]
    assert strip(tmp_path / "log") == strip(workdir / "train.log")


def test_rule_and_attention_commands(workdir, tmp_path):
    ckpt = str(workdir / "model" / "m.ckpt")
    assert run(["export-rules", "--ckpt", ckpt, "--out", str(tmp_path / "rules.txt")]) == 0
    (tmp_path / "pre.txt").write_text("rq <= r1, r2 | conf=0.9 support=10\n")
    assert run(["import-rules", "--ckpt", ckpt, "--rules", str(tmp_path / "pre.txt"),
                "--out", str(tmp_path / "m2.ckpt")]) == 0
    assert run(["export-rules", "--ckpt", str(tmp_path / "m2.ckpt"), "--out", str(tmp_path / "r2.txt")]) == 0
    assert (tmp_path / "r2.txt").read_text() == "rq <= r1, r2 | conf=0.9 support=900\n"
    _, _, _, rules = load_model(tmp_path / "m2.ckpt")
    assert rules.frozen_overlay
    assert run(["export-attention", "--ckpt", str(tmp_path / "m2.ckpt"), "--out", str(tmp_path / "a.csv")]) == 0
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "query_relation,relation,alpha" and len(rows) == 5
    (tmp_path / "broken.txt").write_text("rq <= r1 conf=1\n")
    assert run(["import-rules", "--ckpt", ckpt, "--rules", str(tmp_path / "broken.txt"),
                "--out", str(tmp_path / "m3.ckpt")]) == 2


def test_outputs_create_missing_directories(workdir, tmp_path):
    ckpt = str(workdir / "model" / "m.ckpt")
    deep = tmp_path / "a" / "b"
    assert run(["export-rules", "--ckpt", ckpt, "--out", str(deep / "rules.txt")]) == 0
    assert run(["export-attention", "--ckpt", ckpt, "--out", str(deep / "att" / "a.csv")]) == 0
    cfg = str(workdir / "cfg.json")
    assert run(["train", "--data", str(workdir / "data"), "--config", cfg, "--out", str(deep / "m" / "m.ckpt"),
                "--log", str(deep / "logs" / "train.log")]) == 0
    assert (deep / "logs" / "train.log").read_text().strip()
