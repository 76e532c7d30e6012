import csv
import io
import json

import numpy as np
import pytest

from morecap import autodiff as ad
from morecap.cli import main
from morecap.data import load_scenes

SMALL = {"epochs": 2, "hidden": 16, "knn": 3, "lr": 0.002, "data": {"n_scenes": 16}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workspace(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    code, _, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "data")
    assert code == 0
    code, _, _ = run(capsys, "train", "--config", cfg, "--data", tmp_path / "data", "--out", tmp_path / "ck.json")
    assert code == 0
    return tmp_path


def test_gen_data_deterministic_and_loadable(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "gen-data", "--seed", 3, "--out", tmp_path / d)[0] == 0
    for name in ("scenes.jsonl", "captions.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(load_scenes(tmp_path / "a" / "scenes.jsonl")) == 200


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    assert run(capsys, "gen-data", "--out", tmp_path)[0] == 0
    code, _, err = run(capsys, "gen-data", "--out", tmp_path)
    assert code != 0 and "--force" in err
    assert run(capsys, "gen-data", "--out", tmp_path, "--force")[0] == 0


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"knn": 0}))
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
    assert code != 0 and "knn" in err
    cfg.write_text(json.dumps({"nonsense": 1}))
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
    assert code != 0 and "nonsense" in err


def test_train_log_and_checkpoint(workspace):
    lines = (workspace / "ck.json.log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    params, meta, adam = ad.load_checkpoint(workspace / "ck.json")
    assert meta["epoch"] == 2 and adam.step > 0
    assert "dec.out.W" in params


def test_train_missing_data(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "ck.json")
    assert code != 0 and "missing" in err


def test_resume_matches_uninterrupted_run(workspace, capsys):
    cfg = workspace / "cfg.json"
    one = workspace / "one.json"
    run(capsys, "train", "--config", cfg, "--data", workspace / "data", "--out", one, "--epochs", 1)
    run(capsys, "train", "--resume", one, "--data", workspace / "data", "--out", workspace / "two.json",
        "--epochs", 2)
    a, _, _ = ad.load_checkpoint(workspace / "ck.json")
    b, _, _ = ad.load_checkpoint(workspace / "two.json")
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert (workspace / "ck.json.log.jsonl").read_text() == (workspace / "two.json.log.jsonl").read_text()


def test_train_ablations_run(workspace, capsys):
    for flag in ("edges", "slgc", "otag"):
        code, out, _ = run(capsys, "train", "--config", workspace / "cfg.json", "--data", workspace / "data",
                           "--out", workspace / f"{flag}.json", "--ablate", flag, "--epochs", 1)
        assert code == 0 and json.loads(out.splitlines()[0])["epoch"] == 1


def test_eval_report_blocks_and_determinism(workspace, capsys):
    argv = ["eval", "--checkpoint", workspace / "ck.json", "--data", workspace / "data",
            "--k", 0.25, "--k", 0.5, "--out", workspace / "ev"]
    code, out1, _ = run(capsys, *argv)
    assert code == 0
    blocks = json.loads(out1)
    assert [b["k"] for b in blocks] == [0.25, 0.5]
    # GT-box mode: every gate is open, so scores do not depend on k
    assert blocks[0]["cider"] == blocks[1]["cider"]
    assert set(blocks[0]) == {"k", "cider", "bleu4", "rougeL", "meteor", "n", "relational"}
    assert blocks[0]["meteor"] is None
    preds = (workspace / "ev" / "predictions.jsonl").read_bytes()
    png = (workspace / "ev" / "relational.png").read_bytes()
    assert png.startswith(b"\x89PNG")
    _, out2, _ = run(capsys, *argv)
    assert out1 == out2
    assert (workspace / "ev" / "predictions.jsonl").read_bytes() == preds
    assert (workspace / "ev" / "relational.png").read_bytes() == png


def test_eval_vocab_mismatch(workspace, capsys):
    caps = workspace / "data" / "captions.jsonl"
    lines = caps.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["tokens"] = rec["tokens"] + ["zeppelin"]
    caps.write_text("\n".join([json.dumps(rec)] + lines[1:]) + "\n")
    code, _, err = run(capsys, "eval", "--checkpoint", workspace / "ck.json", "--data", workspace / "data")
    assert code != 0 and "vocabulary mismatch" in err and "zeppelin" in err


def test_caption_modes(workspace, capsys):
    scenes = workspace / "data" / "scenes.jsonl"
    code, out, _ = run(capsys, "caption", "--checkpoint", workspace / "ck.json", "--scene", scenes)
    assert code == 0
    recs = [json.loads(x) for x in out.splitlines()]
    n_objects = len(load_scenes(scenes)[0].objects)
    assert len(recs) == n_objects
    assert all(set(r) == {"scene_id", "object_id", "box", "caption"} for r in recs)
    code, out, _ = run(capsys, "caption", "--checkpoint", workspace / "ck.json", "--scene", scenes,
                       "--object-id", 2)
    assert code == 0 and json.loads(out)["object_id"] == 2
    code, _, err = run(capsys, "caption", "--checkpoint", workspace / "ck.json", "--scene", scenes,
                       "--object-id", 999)
    assert code != 0 and "valid ids" in err


def test_madgap_sweep_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "madgap-sweep", "--seeds", 4, "--out", tmp_path)
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:3] == ["config", "madgap_mean", "madgap_std"]
    assert [r[0] for r in rows[1:]] == ["SLGCx1", "SLGCx2", "SLGCx3", "SLGCx4", "SLGCx1+OTAG"]
    assert (tmp_path / "madgap.csv").read_text() == out
    assert (tmp_path / "madgap.png").read_bytes().startswith(b"\x89PNG")


def test_gradcheck_command_reports_every_component(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    lines = out.splitlines()
    names = [ln.split()[0] for ln in lines]
    assert {"op:matmul", "op:softmax", "slgc", "otag", "decoder", "full"} <= set(names)
    assert all("max_rel_err=" in ln and ln.endswith("PASS") for ln in lines)
