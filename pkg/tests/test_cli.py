import numpy as np
import pytest

from conftest import SMALL_VALUES
from hsicdfsl import cli
from hsicdfsl import pipeline as P
from hsicdfsl.checkpoint import load_checkpoint
from hsicdfsl.hsidata import read_cube
from hsicdfsl.report import read_kv, read_trace

SETS = [a for s, kv in SMALL_VALUES.items() for k, v in kv.items() for a in ("--set",
                                                                             f"{s}.{k}={v}")]


def run(*argv):
    return cli.main(list(argv) + SETS)


def test_bad_key_exits_one(capsys):
    assert run("show-config", "--set", "run.nonsense=1") == cli.EXIT_CONFIG
    assert "run.nonsense" in capsys.readouterr().err


def test_inconsistent_config_exits_one(capsys):
    assert cli.main(["show-config", "--set", "run.pca_bands=20"]) == cli.EXIT_CONFIG
    assert "encoder.bands" in capsys.readouterr().err


def test_missing_config_file_exits_one(tmp_path):
    assert run("show-config", "--config", str(tmp_path / "none.ini")) == cli.EXIT_CONFIG


def test_show_config_round_trips(tmp_path, capsys):
    assert run("show-config") == 0
    text = capsys.readouterr().out
    path = tmp_path / "c.ini"
    path.write_text(text)
    assert cli.main(["show-config", "--config", str(path)]) == 0
    assert capsys.readouterr().out == text


def test_numeric_failure_exits_two(tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise FloatingPointError("loss is nan")

    monkeypatch.setattr(P, "run_source_phase", boom)
    assert run("train-source", "--out", str(tmp_path / "s.mifo")) == cli.EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "skipped (frozen)" in out and out.strip().endswith("PASS")


def test_gradcheck_threshold_failure_exits_three():
    assert cli.main(["gradcheck", "--threshold", "1e-30"]) == cli.EXIT_CHECK


def test_data_pca_train_adapt_eval_chain(tmp_path):
    d = tmp_path / "data"
    assert run("gen-data", "--out", str(d)) == 0
    raw = read_cube(d / "target.hsic")
    assert raw.cube.shape == (20, 20, 10)
    assert run("pca", str(d / "target.hsic"), "--out", str(tmp_path / "t6.hsic")) == 0
    assert read_cube(tmp_path / "t6.hsic").cube.shape == (20, 20, 6)

    ckpt = tmp_path / "src.mifo"
    assert run("train-source", "--data", str(d), "--out", str(ckpt)) == 0
    params, extra = load_checkpoint(ckpt)
    assert params.backbone_frozen and len(extra["source_losses"]) == 6

    adapted = tmp_path / "ad.mifo"
    assert run("adapt", "--data", str(d), "--checkpoint", str(ckpt), "--trial", "1",
               "--out", str(adapted)) == 0
    after, meta = load_checkpoint(adapted)
    assert int(meta["trial"][0]) == 1
    for n in params.frozen_names():
        assert after[n].data.tobytes() == params[n].data.tobytes()

    assert run("eval", "--data", str(d), "--checkpoint", str(adapted), "--no-figures",
               "--out", str(tmp_path / "ev")) == 0
    kv = read_kv(tmp_path / "ev" / "eval.report.kv")
    assert kv["trials"] == "1" and 0 <= float(kv["mean.oa"]) <= 1

    emb = tmp_path / "z.npz"
    assert run("dump-embeddings", "--data", str(d), "--checkpoint", str(ckpt),
               "--out", str(emb)) == 0
    with np.load(emb) as z:
        assert z["embeddings"].shape == (400, 8) and (z["labels"] > 0).all()


def test_eval_rejects_mismatched_support(tmp_path):
    d = tmp_path / "data"
    run("gen-data", "--out", str(d))
    run("train-source", "--data", str(d), "--out", str(tmp_path / "s.mifo"))
    run("adapt", "--data", str(d), "--checkpoint", str(tmp_path / "s.mifo"),
        "--out", str(tmp_path / "a.mifo"))
    argv = ["eval", "--data", str(d), "--checkpoint", str(tmp_path / "a.mifo"),
            "--out", str(tmp_path / "e")] + SETS + ["--set", "run.seed=9"]
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_run_writes_reports_and_figures(tmp_path):
    out = tmp_path / "r"
    assert run("run", "--out", str(out)) == 0
    for name in ("full.report.txt", "full.report.kv", "full.trace.csv", "full.audit.kv",
                 "full.timings.kv", "full.map.ppm", "full.schedule.png",
                 "full.per_class.png", "source.mifo", "config.ini"):
        assert (out / name).exists(), name
    assert (out / "full.schedule.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "full.map.ppm").read_bytes().startswith(b"P6\n20 20\n255\n")
    rows = read_trace(out / "full.trace.csv")
    assert len(rows) == 2 * 2 and all(0 <= r["lambda2"] <= 1 for r in rows)
    kv = read_kv(out / "full.report.kv")
    assert "seconds" not in (out / "full.report.kv").read_text()
    assert kv["path.checkpoint"] == "source.mifo"
    assert float(read_kv(out / "full.timings.kv")["source_seconds"]) > 0


def test_run_reports_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("run", "--no-figures", "--out", str(tmp_path / name)) == 0
    for f in ("full.report.kv", "full.report.txt", "full.trace.csv", "full.audit.kv",
              "full.map.ppm", "source.mifo"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_run_reuses_checkpoint(tmp_path):
    assert run("run", "--no-figures", "--out", str(tmp_path / "a")) == 0
    assert run("run", "--no-figures", "--checkpoint", str(tmp_path / "a" / "source.mifo"),
               "--out", str(tmp_path / "b")) == 0
    assert (tmp_path / "a" / "full.report.kv").read_bytes() == \
        (tmp_path / "b" / "full.report.kv").read_bytes()


def test_checkpoint_encoder_mismatch(tmp_path):
    assert run("run", "--no-figures", "--out", str(tmp_path / "a")) == 0
    argv = ["run", "--checkpoint", str(tmp_path / "a" / "source.mifo"),
            "--out", str(tmp_path / "b")] + SETS + ["--set", "encoder.embed_dim=16"]
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_ablation_verdicts():
    reps = {}
    for name, oa in (("full", 0.9), ("source-only", 0.75), ("no-smoothing", 0.885),
                     ("no-intermediate", 0.87)):
        reps[name] = P.RunReport(name, ["a"], [P.TrialResult(0, oa, oa, oa, np.ones(1),
                                                             np.eye(1))])
    verdicts = {v[0]: v for v in cli.ablation_verdicts(reps)}
    assert verdicts["source-only"][3] and verdicts["no-intermediate"][3]
    assert not verdicts["no-smoothing"][3]
    assert verdicts["no-smoothing"][1] == pytest.approx(1.5)
