import csv
import json

import pytest

from dynasub import cli

TINY = {"n_per_class": 60, "epochs": 4, "batch_size": 32, "k_start": 6, "subgroup_start_epoch": 1,
        "patience": 50}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(run), "--quiet"]) == 0
    return root, cfg, run


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_train_writes_artifacts(trained):
    _, _, run = trained
    for name in ("checkpoint.json", "train_log.csv", "edits.jsonl", "k_per_epoch.csv", "loss_curves.csv",
                 "metrics.json", "metrics.csv", "regret.csv", "latent_pca.csv", "manifest.json"):
        assert (run / name).exists(), name
    man = _manifest(run)
    assert man["command"] == "train" and man["config"]["seed"] == 3
    assert man["config_hash"] == cli.config_hash(cli.RunConfig.from_dict(man["config"]))
    assert len(man["config_hash"]) == 40


def test_config_hash_stable_and_sensitive():
    a = cli.RunConfig(seed=1)
    assert cli.config_hash(a) == cli.config_hash(cli.RunConfig(seed=1))
    assert cli.config_hash(a) != cli.config_hash(cli.RunConfig(seed=2))


def test_eval_ood_baseline_adapt_report(trained, capsys):
    root, _, run = trained
    assert cli.main(["eval", str(run), "--split", "val", "--out", str(root / "ev")]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"id_accuracy", "nmi", "ari", "class_ood_accuracy"}
    assert cli.main(["ood", str(run / "checkpoint.json"), "--margin", "0.5", "--out", str(root / "ood")]) == 0
    assert _manifest(root / "ood")["margin"] == 0.5
    assert cli.main(["baseline", str(run), "--method", "kmeanspp"]) == 0
    assert _manifest(run / "baseline-kmeanspp")["method"] == "kmeanspp"
    assert cli.main(["adapt", str(run), "--out", str(root / "adapt")]) == 0
    assert "dropped_acc_after" in json.loads((root / "adapt" / "adapt.json").read_text())
    capsys.readouterr()
    out = root / "summary.csv"
    assert cli.main(["report", str(run), str(run / "baseline-kmeanspp"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["method"] for r in rows] == ["dynasub", "kmeanspp"]
    assert rows[0]["run"] == str(run)
    assert list(rows[0]) == list(cli.SUMMARY_COLUMNS)


def test_generate(tmp_path, capsys):
    assert cli.main(["generate", "--dataset", "circles", "--drop-class", "2", "--out", str(tmp_path)]) == 0
    head = (tmp_path / "data.csv").read_text().splitlines()[0]
    assert head == "f0,f1,label,split,is_ood"
    assert _manifest(tmp_path)["dropped_class"] == 2


@pytest.mark.parametrize("argv", [
    ["eval", "/nonexistent/run"],
    ["baseline", "{run}", "--method", "dbscan"],
    ["eval", "{run}", "--dataset", "moons"],
    ["train", "--config", "{bad}"],
    ["report", "{root}"],
])
def test_errors_exit_2(argv, trained, capsys):
    root, _, run = trained
    bad = root / "bad.json"
    bad.write_text(json.dumps({"not_a_key": 1}))
    argv = [a.format(run=run, bad=bad, root=root) for a in argv]
    assert cli.main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--version"])
    assert ei.value.code == 0
