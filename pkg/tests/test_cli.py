import json
import time

import numpy as np
import pytest

from normshape.cli import build_parser, main

SMALL_DIMS = "[24,16,8]"


def run(argv):
    return main(argv)


@pytest.mark.parametrize(
    "cmd", ["synth", "preprocess", "train", "score", "fewshot", "project", "interp", "eval"]
)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out.lower()


def test_missing_required_flag_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["synth"])  # no --out-dir
    assert exc.value.code == 2


def test_synth_reruns_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["synth", "--out-dir", str(d), "--seed", "3",
                    "--set", "synth.n=4", "--set", f"synth.dims={SMALL_DIMS}"]) == 0
    for name in ("healthy_0000.mvol", "cohort.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_bad_config_key_exit_code(tmp_path):
    code = run(["score", "--out-dir", str(tmp_path)])  # missing model.path etc.
    assert code == 3


def test_eval_single_class_bad_input(tmp_path, capsys):
    csv = tmp_path / "scores.csv"
    csv.write_text("id,label,score,method\na,1,0.5,m\nb,1,0.7,m\n")
    code = run(["eval", "--out-dir", str(tmp_path / "out"),
                "--set", f"eval.scores_csv={csv}"])
    assert code == 3
    err = capsys.readouterr().err
    assert "class 0" in err or "SingleClass" in err


def test_smoke_pipeline(tmp_path):
    t0 = time.time()
    base = tmp_path
    model_cfg = [
        "--set", f"model.dims={SMALL_DIMS}",
        "--set", "model.channels=[2,4]",
        "--set", "model.latent_dim=4",
    ]
    assert run(["synth", "--out-dir", str(base / "healthy"), "--seed", "0",
                "--set", "synth.n=20", "--set", f"synth.dims={SMALL_DIMS}"]) == 0
    assert run(["synth", "--out-dir", str(base / "abnormal"), "--seed", "500",
                "--set", "synth.n=8", "--set", f"synth.dims={SMALL_DIMS}",
                "--set", "synth.kind=abnormal"]) == 0
    assert run(["preprocess", "--out-dir", str(base / "prep"),
                "--set", f"preprocess.in_dir={base / 'healthy'}",
                "--set", f"preprocess.dims={SMALL_DIMS}"]) == 0
    assert run(["train", "--out-dir", str(base / "run"), "--seed", "0",
                "--set", f"train.in_dir={base / 'prep'}",
                "--set", "train.epochs=5", *model_cfg]) == 0
    assert (base / "run" / "model.nsckpt").exists()
    history = (base / "run" / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_loss,val_dice,lr"
    assert len(history) == 6

    score_cfg = [
        "--set", f"model.path={base / 'run' / 'model.nsckpt'}",
        "--set", f"score.train_dir={base / 'prep'}",
        "--set", f"score.test_healthy_dir={base / 'healthy'}",
        "--set", f"score.test_abnormal_dir={base / 'abnormal'}",
        *model_cfg,
    ]
    assert run(["score", "--out-dir", str(base / "scores"), *score_cfg,
                "--set", "score.asm=true", "--set", "score.asm_k=4"]) == 0
    lines = (base / "scores" / "scores.csv").read_text().splitlines()
    assert lines[0] == "id,label,score,method"
    methods = {ln.split(",")[3] for ln in lines[1:]}
    assert methods == {"zero_shot", "volume", "asm_zero_shot"}

    assert run(["fewshot", "--out-dir", str(base / "fewshot"), *score_cfg,
                "--set", "fewshot.reps=100", "--set", "fewshot.epochs=5"]) == 0
    report = (base / "fewshot" / "report.csv").read_text().splitlines()
    assert report[0].startswith("method,n_boot")

    assert run(["project", "--out-dir", str(base / "pca"), *score_cfg]) == 0
    pca = (base / "pca" / "pca.csv").read_text().splitlines()
    assert pca[0] == "id,label,p1,p2" and len(pca) == 29

    assert run(["interp", "--out-dir", str(base / "interp"), *score_cfg]) == 0
    assert (base / "interp" / "interp_t0.pgm").exists()
    assert (base / "interp" / "interp_t0.5.pgm").exists()
    assert (base / "interp" / "interp_volumes.csv").exists()

    assert run(["eval", "--out-dir", str(base / "eval"),
                "--set", f"eval.scores_csv={base / 'scores' / 'scores.csv'}",
                "--set", "eval.reps=200"]) == 0
    rows = (base / "eval" / "report.csv").read_text().splitlines()
    assert len(rows) == 4  # header + 3 methods

    manifest = json.loads((base / "run" / "manifest.json").read_text())
    assert set(manifest) == {"command", "config_hash", "seed", "version"}
    assert time.time() - t0 < 60


def test_score_rerun_byte_identical(tmp_path):
    base = tmp_path
    for args in (
        ["synth", "--out-dir", str(base / "h"), "--seed", "0",
         "--set", "synth.n=12", "--set", f"synth.dims={SMALL_DIMS}"],
        ["synth", "--out-dir", str(base / "a"), "--seed", "77",
         "--set", "synth.n=6", "--set", f"synth.dims={SMALL_DIMS}",
         "--set", "synth.kind=abnormal"],
        ["train", "--out-dir", str(base / "run"), "--seed", "0",
         "--set", f"train.in_dir={base / 'h'}", "--set", "train.epochs=2",
         "--set", f"model.dims={SMALL_DIMS}", "--set", "model.channels=[2,4]",
         "--set", "model.latent_dim=4"],
    ):
        assert run(args) == 0
    score_args = [
        "score",
        "--set", f"model.path={base / 'run' / 'model.nsckpt'}",
        "--set", f"model.dims={SMALL_DIMS}", "--set", "model.channels=[2,4]",
        "--set", "model.latent_dim=4",
        "--set", f"score.train_dir={base / 'h'}",
        "--set", f"score.test_healthy_dir={base / 'h'}",
        "--set", f"score.test_abnormal_dir={base / 'a'}",
    ]
    assert run(score_args + ["--out-dir", str(base / "s1")]) == 0
    assert run(score_args + ["--out-dir", str(base / "s2")]) == 0
    assert (base / "s1" / "scores.csv").read_bytes() == (base / "s2" / "scores.csv").read_bytes()
