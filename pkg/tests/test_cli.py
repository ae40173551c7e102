import json

import pytest

from refocs.cli import lambda_sweep_points, load_config, main
from refocs.config import RunConfig
from refocs.errors import ConfigError


TINY = ["--set", "data.num_classes=14", "--set", "data.samples_per_class=6",
        "--set", "data.train_fraction=0.5", "--set", "data.image_size=[16,16]",
        "--set", "model.channels=4", "--set", "model.n_blocks=2", "--set", "model.d_z=8",
        "--set", "episodes.k_query_in_per_class=2", "--set", "episodes.k_query_out_total=6",
        "--set", "episodes.episodes_train=3", "--set", "episodes.episodes_test=2",
        "--set", "train.checkpoint_every=2"]


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--output-dir", str(out), *TINY]) == 0
    assert (out / "resolved-config.json").exists()
    assert (out / "checkpoints" / "last.pt").exists()
    assert (out / "checkpoints" / "episode-000002.pt").exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 3
    resolved = RunConfig.from_dict(json.loads((out / "resolved-config.json").read_text()))
    assert resolved.episodes.episodes_train == 3

    assert main(["eval", "--output-dir", str(out), "--set", "episodes.episodes_test=3"]) == 0
    report = json.loads((out / "eval-report.json").read_text())
    assert len(report["accuracy"]) == 3
    assert (out / "tables" / "eval.csv").exists()
    assert "AUROC" in capsys.readouterr().out


def test_resume_from_checkpoint(tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--output-dir", str(out), *TINY]) == 0
    first = (out / "metrics.jsonl").read_bytes()
    ck = out / "checkpoints" / "episode-000002.pt"
    assert main(["train", "--output-dir", str(out), "--resume", str(ck), *TINY]) == 0
    assert (out / "metrics.jsonl").read_bytes() == first
    other = ["--set", "train.seed=9"]
    assert main(["train", "--output-dir", str(out), "--resume", str(ck), *TINY, *other]) == 2


def test_eval_missing_checkpoint_exits_3(tmp_path, capsys):
    assert main(["eval", "--output-dir", str(tmp_path), "--checkpoint", str(tmp_path / "x.pt")]) == 3
    err = capsys.readouterr().err.strip()
    assert err.startswith("data error:") and "\n" not in err


def test_config_errors_exit_2(tmp_path):
    assert main(["train", "--output-dir", str(tmp_path), "--set", "episodes.k_shoot=1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"widht": 3}}')
    assert main(["train", "--config", str(bad), "--output-dir", str(tmp_path)]) == 2
    bad.write_text("{nope")
    assert main(["train", "--config", str(bad), "--output-dir", str(tmp_path)]) == 2
    assert main(["ablate", "--output-dir", str(tmp_path), "--variants", "nope"]) == 2


def test_override_flips_shots():
    cfg = load_config("configs/glyph-5shot.json", ["episodes.k_shot=1"])
    assert load_config("configs/glyph-5shot.json", []).episodes.k_shot == 5
    assert cfg.episodes.k_shot == 1
    with pytest.raises(ConfigError):
        load_config(None, ["nope.key=1"])


def test_generate_data_writes_manifests(tmp_path):
    assert main(["generate-data", "--output-dir", str(tmp_path), *TINY]) == 0
    for split in ("train", "test"):
        assert (tmp_path / "data" / split / "manifest.json").exists()
    out = tmp_path / "fromdisk"
    pairs = [v for v in TINY[1::2] if not v.startswith(("data.num", "data.samples"))]
    args = [x for v in pairs for x in ("--set", v)]
    rc = main(["train", "--output-dir", str(out), *args,
               "--set", "data.source=manifest",
               "--set", f"data.train_path={tmp_path / 'data' / 'train'}",
               "--set", f"data.test_path={tmp_path / 'data' / 'test'}"])
    assert rc == 0


def test_estimate_exemplars_and_ablate(tmp_path):
    assert main(["estimate-exemplars", "--output-dir", str(tmp_path), *TINY,
                 "--set", "train.pretrain_epochs=1"]) == 0
    assert (tmp_path / "exemplars" / "exemplars.json").exists()
    assert json.loads((tmp_path / "pretrain-history.json").read_text())
    out = tmp_path / "abl"
    assert main(["ablate", "--output-dir", str(out), *TINY, "--variants", "full", "no_clf"]) == 0
    assert len((out / "tables" / "ablation.csv").read_text().splitlines()) == 3


def test_sweep_lambda_grid_and_run(tmp_path):
    cfg = load_config(None, [])
    pts = lambda_sweep_points(cfg)
    vae = [p for p in pts if p[0] == "lambda_vae"]
    bce = [p for p in pts if p[0] == "lambda_bce"]
    assert [p[1] for p in vae] == [1e-6, 1e-5, 1e-4, 1e-3, 1e-2]
    assert all(p[2]["loss.lambda_ce"] == 10 and p[2]["loss.lambda_bce"] == 10 for p in vae)
    assert all(p[2]["loss.lambda_vae"] == 1e-4 and p[2]["loss.lambda_ce"] == 10 for p in bce)
    rc = main(["sweep-lambda", "--output-dir", str(tmp_path), *TINY, "--axis", "bce",
               "--set", "eval.lambda_bce_grid=[1,10]"])
    assert rc == 0
    assert len((tmp_path / "tables" / "lambda_bce.csv").read_text().splitlines()) == 3


def test_sweep_openness(tmp_path):
    out = tmp_path / "s"
    extra = ["--set", "data.num_classes=28", "--set", "data.train_fraction=0.25"]
    assert main(["train", "--output-dir", str(out), *TINY, *extra]) == 0
    assert main(["sweep-openness", "--output-dir", str(out), "--set", "eval.sweep_episodes=2",
                 "--set", "eval.n_target_values=[5,7,10]"]) == 0
    res = json.loads((out / "openness-sweep.json").read_text())
    assert list(res) == ["0.0", "8.7", "18.4"]
    assert (out / "tables" / "openness.csv").exists()
