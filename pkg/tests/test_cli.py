import csv
import json

import pytest

from incremental_nerf import cli
from incremental_nerf.cli import (ConfigError, RunConfig, load_config, main, parse_config_text,
                                  read_poses_json)
from incremental_nerf.errors import DivergedError

TINY = """
# small everything so the whole pipeline runs in seconds
scene_resolution = 16
n_chunks = 2
per_chunk = 2
width = 12
height = 12
samples = 16
iters_per_stage = 10
rays_per_iter = 64
lr_field = 0.1
grid_resolution = 12
d_select = 2
bench_sizes = 6, 7
bench_d = 3
bench_seeds = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "stream")]) == 0
    return root, cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_parsing():
    cfg = parse_config_text("lr_field = 0.5\njitter = yes\nbench_sizes = 4 5\n# note\n")
    assert cfg.lr_field == 0.5 and cfg.jitter is True and cfg.bench_sizes == (4, 5)
    with pytest.raises(ConfigError):
        parse_config_text("no_such_key = 1")
    with pytest.raises(ConfigError):
        parse_config_text("iters_per_stage = many")
    with pytest.raises(ConfigError):
        parse_config_text("just words")
    with pytest.raises(ConfigError):
        RunConfig(near=5.0, far=1.0).validate()
    with pytest.raises(ConfigError):
        RunConfig(field_decay=2.0).validate()
    assert load_config(None, seed=7).seed == 7


def test_simulate_layout_and_rerun(workdir, tmp_path):
    root, cfg = workdir
    stream = root / "stream"
    names = sorted(p.name for p in stream.iterdir())
    assert names == ["chunk_0", "chunk_1", "gt_field.ilnf", "manifest.json", "poses_gt.json",
                     "stream.json"]
    manifest = json.loads((stream / "manifest.json").read_text())
    assert manifest["config"]["per_chunk"] == 2 and manifest["command"] == "simulate"
    again = tmp_path / "again"
    assert main(["simulate", "--config", str(cfg), "--out", str(again)]) == 0
    for p in stream.rglob("*"):
        if p.is_file():
            assert (again / p.relative_to(stream)).read_bytes() == p.read_bytes()


def test_simulate_single_image(tmp_path):
    cfg = tmp_path / "one.cfg"
    cfg.write_text(TINY + "n_chunks = 1\nper_chunk = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert [p.name for p in (tmp_path / "s" / "chunk_0").iterdir()] == ["img_0.ppm"]
    assert len(json.loads((tmp_path / "s" / "poses_gt.json").read_text())["cameras"]) == 1


def test_train_outputs_and_determinism(workdir):
    root, cfg = workdir
    outs = []
    for name in ("run_a", "run_b"):
        out = root / name
        assert main(["train", "--config", str(cfg), "--stream", str(root / "stream"),
                     "--out", str(out)]) == 0
        outs.append(out)
    a, b = outs
    rows = read_csv(a / "metrics.csv")
    assert list(rows[0]) == ["stage", "mode", "chunk", "psnr", "ssim", "mean_rot_err_deg",
                             "mean_trans_err"]
    assert [(r["stage"], r["chunk"]) for r in rows] == [("0", "0"), ("1", "0"), ("1", "1")]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    for t in range(2):
        assert (a / f"field_stage{t}.ilnf").read_bytes() == (b / f"field_stage{t}.ilnf").read_bytes()
    poses = json.loads((a / "poses_stage1.json").read_text())
    cam = poses["cameras"][3]
    assert cam["id"] == 3 and len(cam["rot"]) == 9 and len(cam["trans"]) == 3
    assert cam["reward"] <= 0 and "fx" in poses["intrinsics"]


def test_eval_reproduces_training_numbers(workdir):
    root, cfg = workdir
    run = root / "run_eval"
    assert main(["train", "--config", str(cfg), "--stream", str(root / "stream"),
                 "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "field_stage1.ilnf"), "--poses",
                 str(run / "poses_stage1.json"), "--stream", str(root / "stream"),
                 "--out", str(run / "eval")]) == 0
    trained = [r for r in read_csv(run / "metrics.csv") if r["stage"] == "1"]
    evaluated = read_csv(run / "eval" / "eval.csv")
    for t, e in zip(trained, evaluated):
        for key in ("psnr", "ssim", "mean_rot_err_deg", "mean_trans_err"):
            assert abs(float(t[key]) - float(e[key])) <= 1e-6


def test_eval_ground_truth_field_and_poses(workdir, tmp_path):
    root, _ = workdir
    stream = root / "stream"
    gt = json.loads((stream / "poses_gt.json").read_text())
    for c in gt["cameras"]:
        c["reward"] = 0.0
    poses_path = tmp_path / "gt_poses.json"
    poses_path.write_text(json.dumps(gt))
    assert main(["eval", "--checkpoint", str(stream / "gt_field.ilnf"), "--poses",
                 str(poses_path), "--stream", str(stream), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "eval.csv")
    for r in rows:
        # the stored images are 8-bit, so only quantisation error remains
        assert float(r["psnr"]) > 50.0
        assert float(r["mean_rot_err_deg"]) < 1e-5 and float(r["mean_trans_err"]) < 1e-9
    poses, chunk_of, _ = read_poses_json(poses_path)
    assert chunk_of == [0, 0, 1, 1]


def test_bench_command(workdir):
    root, cfg = workdir
    out = root / "bench"
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "bench.csv")
    assert {(r["n"], r["solver"]) for r in rows if r["n"] != "194"} == {
        (n, s) for n in ("6", "7") for s in ("greedy", "brute_force")}
    big = [r for r in rows if r["n"] == "194"]
    assert big and all(r["solver"] == "greedy" and float(r["micros"]) < 100000 for r in big)
    assert all(float(r["reward_ratio"]) <= 1.0 for r in rows if r["reward_ratio"])
    assert (out / "manifest.json").exists()


def test_exit_codes(workdir, tmp_path, capsys, monkeypatch):
    root, cfg = workdir
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--stream", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--mode", "bogus", "--stream", "s", "--out", "o"]) == 1
    inf_rate = tmp_path / "inf.cfg"
    inf_rate.write_text("lr_field = inf\n")
    assert main(["train", "--config", str(inf_rate), "--stream", str(root / "stream"),
                 "--out", str(tmp_path / "i")]) == 1

    def diverge(*args, **kwargs):
        raise DivergedError(17, 1, float("nan"))

    monkeypatch.setattr(cli, "incremental_fit", diverge)
    code = main(["train", "--config", str(cfg), "--stream", str(root / "stream"),
                 "--out", str(tmp_path / "d")])
    assert code == 2
    assert "stage 1, iteration 17" in capsys.readouterr().err
