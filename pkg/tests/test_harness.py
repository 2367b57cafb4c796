import csv
import json
import struct
import zlib

import numpy as np
import pytest
from sklearn.base import clone

from mvp3d import autodiff as ad
from mvp3d.estimator import MvPEstimator
from mvp3d.harness import ablate as ablate_mod
from mvp3d.harness.cli import geometry_of, main
from mvp3d.harness.config import RunConfig
from mvp3d.harness.evaluate import evaluate, infer_scenes
from mvp3d.harness.parallel import ThreadSettingError, max_threads, ordered_map
from mvp3d.harness.train import Trainer, TrainingDivergedError, load_network
from mvp3d.model.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint
from mvp3d.model.config import ConfigError, ModelConfig
from mvp3d.model.network import MvPNetwork
from mvp3d.scenegen import SceneConfig, generate_scenes, write_dataset

TINY_SET = ["--set", "model.C=8", "--set", "model.L=2", "--set", "model.K=2", "--set", "model.heads=2",
            "--set", "model.N=2"]


def tiny_run(scenes, **kw):
    model = ModelConfig(N=2, C=8, L=2, K=2, heads=2, **{k: v for k, v in geometry_of(scenes[0]).items()})
    return RunConfig(model=model, **kw)


@pytest.fixture(scope="module")
def data_file(tmp_path_factory, small_scenes):
    path = tmp_path_factory.mktemp("data") / "small.mvpd"
    write_dataset(small_scenes, path)
    return path


# ---------------------------------------------------------------- config


def test_run_config_roundtrip(tmp_path):
    run = RunConfig(model=ModelConfig(N=3, L=2, query_mode="per_joint"), lr=3e-4, max_steps=17,
                    lr_decay_epoch=None, train_data="x.mvpd")
    run.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == run and back.to_json() == run.to_json()


def test_run_config_rejects_unknown_keys():
    d = RunConfig().to_dict()
    d["bogus"] = 1
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    d = RunConfig().to_dict()
    d["model"]["nope"] = 1
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"model.nope": 1})
    with pytest.raises(ConfigError):
        RunConfig(batch_size=2)
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")


def test_run_config_defaults():
    run = RunConfig()
    assert (run.lr, run.lr_decay_epoch, run.confidence_threshold, run.lam) == (1e-4, 20, 0.1, 2.5)
    assert run.lr_at(19) == 1e-4 and run.lr_at(0) / run.lr_at(20) == 10.0
    assert run.with_overrides({"model.L": 2, "lr": 1e-3}).model.L == 2


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path, small_scenes):
    run = tiny_run(small_scenes)
    trainer = Trainer(run, small_scenes, output_dir=tmp_path, persist=False)
    for _ in range(3):
        trainer.train_step()
    trainer.save(tmp_path / "c.mvpc")
    _, net, meta, tensors = load_network(tmp_path / "c.mvpc")
    assert meta["step"] == 3 and int(tensors["adam.t"]) == 3
    for s in small_scenes:
        a, b = trainer.net.predict_scene(s), net.predict_scene(s)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_checkpoint_dtypes_and_layout():
    tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.ones(2, np.float32),
               "t": np.asarray(5, np.int64)}
    buf = encode_checkpoint({"x": 1}, tensors)
    assert buf[:4] == b"MVPC" and struct.unpack("<I", buf[4:8])[0] == 1
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
    cfg, back = decode_checkpoint(buf)
    assert cfg == {"x": 1} and list(back) == ["a", "b", "t"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])


def test_checkpoint_corruption_errors(tmp_path):
    buf = encode_checkpoint({"x": 1}, {"a": np.zeros(4)})
    bad = bytearray(buf)
    bad[30] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-7])
    body = buf[:4] + struct.pack("<I", 2) + buf[8:-4]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
    body = buf[:-4] + b"\0"
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


# ---------------------------------------------------------------- training


def test_resume_is_bit_identical(tmp_path, small_scenes):
    run = tiny_run(small_scenes, max_steps=7, checkpoint_every=3, lr=1e-3)
    full = Trainer(run, small_scenes, output_dir=tmp_path / "a")
    full.train()
    part = Trainer(run.with_overrides({"max_steps": 3}), small_scenes, output_dir=tmp_path / "b")
    part.train()
    resumed = Trainer(run, small_scenes, output_dir=tmp_path / "b")
    resumed.resume(tmp_path / "b" / "step0000003.mvpc")
    resumed.train()
    assert [repr(x) for x in full.state.losses[3:]] == [repr(x) for x in resumed.state.losses]
    for k, p in full.net.params.items():
        assert p.value.tobytes() == resumed.net.params[k].value.tobytes()
    rows = list(csv.DictReader(open(tmp_path / "b" / "train_log.csv")))
    full_rows = list(csv.DictReader(open(tmp_path / "a" / "train_log.csv")))
    assert [r["loss"] for r in rows] == [r["loss"] for r in full_rows]
    assert list(rows[0]) == ["step", "epoch", "loss", "lr", "wall_ms"]


def test_resume_rejects_other_model(tmp_path, small_scenes):
    run = tiny_run(small_scenes, max_steps=1)
    Trainer(run, small_scenes, output_dir=tmp_path).train()
    other = Trainer(run.with_overrides({"model.L": 1}), small_scenes, output_dir=tmp_path / "o")
    with pytest.raises(CheckpointError):
        other.resume(tmp_path / "final.mvpc")


def test_lr_decay_logged_exactly_10x(tmp_path, small_scenes):
    scenes = small_scenes[:2]
    run = tiny_run(scenes, max_steps=4, lr_decay_epoch=1)
    Trainer(run, scenes, output_dir=tmp_path).train()
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    lrs = [float(r["lr"]) for r in rows]
    assert [int(r["epoch"]) for r in rows] == [0, 0, 1, 1]
    assert lrs[0] == lrs[1] and lrs[2] == lrs[3] and lrs[0] / lrs[2] == 10.0


def test_data_order_is_seeded_permutation(small_scenes):
    t = Trainer(tiny_run(small_scenes, seed=3), small_scenes, persist=False)
    for epoch in range(3):
        idx = [t.scene_at(epoch * 4 + i)[1] for i in range(4)]
        assert idx == np.random.default_rng([3, epoch]).permutation(4).tolist()


def test_overfit_single_scene(small_scenes):
    scenes = small_scenes[:1]
    t = Trainer(tiny_run(scenes, max_steps=200, lr=1e-2, lr_decay_epoch=None), scenes, persist=False)
    t.train()
    assert t.state.losses[-1] < 0.25 * t.state.losses[0]


def test_grad_accumulation_averages(small_scenes):
    scenes = small_scenes[:2]
    run = tiny_run(scenes, grad_accum=2, max_steps=1, lr_decay_epoch=None)
    t = Trainer(run, scenes, persist=False)
    t.opt.step = lambda: None
    t.train_step()
    accum = {k: p.grad.copy() for k, p in t.net.params.items()}
    single = Trainer(run.with_overrides({"grad_accum": 1}), scenes, persist=False)
    grads = []
    for i in range(2):
        single.opt.zero_grad()
        ad.backward(single._loss(scenes[single.scene_at(i)[1]]))
        grads.append({k: p.grad.copy() for k, p in single.net.params.items()})
    for k in accum:
        np.testing.assert_allclose(accum[k], 0.5 * (grads[0][k] + grads[1][k]), rtol=1e-10, atol=1e-14)


def test_nan_loss_aborts_with_dump(tmp_path, small_scenes):
    t = Trainer(tiny_run(small_scenes, max_steps=2), small_scenes, output_dir=tmp_path)
    t.net.params["init.b"].value[:] = np.nan
    with pytest.raises(TrainingDivergedError) as e:
        t.train()
    dump = np.load(e.value.dump_path)
    assert int(dump["step"]) == 0 and dump["features"].shape == small_scenes[0].features.shape


# ---------------------------------------------------------------- evaluation


def test_parallel_eval_matches_serial(small_scenes, monkeypatch):
    net = MvPNetwork(tiny_run(small_scenes).model)
    serial = infer_scenes(net, small_scenes, workers=1)
    par = infer_scenes(net, small_scenes, workers=3)
    for (a, b), (c, d) in zip(serial, par):
        assert a.tobytes() == c.tobytes() and b.tobytes() == d.tobytes()


def test_evaluate_empty_predictions(small_scenes):
    net = MvPNetwork(tiny_run(small_scenes).model)
    rows, _ = evaluate(net, small_scenes, thresholds=(25, 50, 100, 150), confidence_threshold=1.0)
    d = {(m, t): v for m, t, v in rows}
    assert [k for k in d if k[0] == "AP"] == [("AP", 25), ("AP", 50), ("AP", 100), ("AP", 150)]
    assert d[("AP", 25)] == 0 and d[("Recall", 500)] == 0 and np.isnan(d[("MPJPE", 500)])


def test_max_threads(monkeypatch):
    monkeypatch.setenv("MVP_THREADS", "3")
    assert max_threads() == 3
    monkeypatch.setenv("MVP_THREADS", "zero")
    with pytest.raises(ThreadSettingError):
        max_threads()
    monkeypatch.setenv("MVP_THREADS", "1")
    assert ordered_map(lambda x: x * x, range(5), workers=4) == [0, 1, 4, 9, 16]


# ---------------------------------------------------------------- CLI


def test_cli_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--scenes", "10", "--seed", "7", "--size", "32", "--views", "3", "--max-persons", "2"]
    assert main(args + ["--out", str(tmp_path / "a.mvpd")]) == 0
    assert main(args + ["--out", str(tmp_path / "new" / "dir" / "b.mvpd")]) == 0
    assert (tmp_path / "a.mvpd").read_bytes() == (tmp_path / "new" / "dir" / "b.mvpd").read_bytes()


def test_cli_gen_data_default_count(tmp_path):
    from mvp3d.scenegen import read_dataset
    assert main(["gen-data", "--out", str(tmp_path / "d.mvpd")]) == 0
    assert len(read_dataset(tmp_path / "d.mvpd")) == 100


def test_cli_usage_errors(tmp_path, monkeypatch, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--views", "0"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--joints", "7"]) == 2
    assert main(["no-such-command"]) == 2
    assert main([]) == 2
    monkeypatch.setenv("MVP_THREADS", "0")
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--scenes", "1"]) == 2
    monkeypatch.delenv("MVP_THREADS")
    # a feasible-looking request the generator cannot satisfy is a runtime failure
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--views", "2", "--size", "4", "--sigma", "1"]) == 1
    assert main(["train", "--out", str(tmp_path / "r")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mvpc"), "--data", "x", "--out", "y"]) == 1


def test_cli_train_eval_infer(tmp_path, data_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_file), "--out", str(out), "--max-steps", "5", "--lr", "1e-3",
                 "--log-every", "5", *TINY_SET]) == 0
    assert (out / "final.mvpc").exists() and (out / "config.json").exists()
    assert len(list(csv.reader(open(out / "train_log.csv")))) == 6
    metrics = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(out / "final.mvpc"), "--data", str(data_file), "--out", str(metrics),
                 "--thresholds", "25,50,100,150", "--predictions", str(tmp_path / "p.jsonl"),
                 "--conf-threshold", "0"]) == 0
    rows = list(csv.reader(open(metrics)))
    assert rows[0] == ["metric", "threshold", "value"]
    assert [r[:2] for r in rows[1:9:2]] == [["AP", "25"], ["AP", "50"], ["AP", "100"], ["AP", "150"]]
    assert {r[0] for r in rows[1:]} >= {"AP", "Recall", "MPJPE"}
    lines = open(tmp_path / "p.jsonl").read().splitlines()
    assert len(lines) == 4 and len(json.loads(lines[0])["confidences"]) == 2
    assert main(["infer", "--checkpoint", str(out / "final.mvpc"), "--data", str(data_file),
                 "--out", str(tmp_path / "i.jsonl"), "--conf-threshold", "0"]) == 0
    assert len(open(tmp_path / "i.jsonl").read().splitlines()) == 4
    # the same evaluation twice gives byte-identical CSVs
    again = tmp_path / "m2.csv"
    main(["eval", "--checkpoint", str(out / "final.mvpc"), "--data", str(data_file), "--out", str(again),
          "--thresholds", "25,50,100,150", "--conf-threshold", "0"])
    assert again.read_bytes() == metrics.read_bytes()


def test_cli_eval_empty_predictions_na(tmp_path, data_file):
    out = tmp_path / "run"
    main(["train", "--data", str(data_file), "--out", str(out), "--max-steps", "1", *TINY_SET])
    metrics = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(out / "final.mvpc"), "--data", str(data_file), "--out", str(metrics),
                 "--conf-threshold", "1"]) == 0
    rows = {(r[0], r[1]): r[2] for r in list(csv.reader(open(metrics)))[1:]}
    assert rows[("MPJPE", "500")] == "n/a" and float(rows[("Recall", "500")]) == 0 and float(rows[("AP", "25")]) == 0


def test_cli_dataset_mismatch_exit_1(tmp_path, data_file):
    out = tmp_path / "run"
    main(["train", "--data", str(data_file), "--out", str(out), "--max-steps", "1", *TINY_SET])
    other = tmp_path / "other.mvpd"
    write_dataset(generate_scenes(2, 1, SceneConfig(V=2, N_max=1, H=16, W=16, heatmap_sigma_px=1.0)), other)
    assert main(["eval", "--checkpoint", str(out / "final.mvpc"), "--data", str(other),
                 "--out", str(tmp_path / "m.csv")]) == 1


def test_cli_grad_check_two_seeds(capsys):
    assert main(["grad-check", "--seed", "0", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("all blocks within tolerance") == 2


def test_cli_grad_check_negative_control(monkeypatch, capsys):
    original = ad.sigmoid

    def broken_sigmoid(x):
        out = original(x)
        if out.backward_fn is not None:
            rule = out.backward_fn
            out.backward_fn = lambda g: tuple(1.5 * t for t in rule(g))
        return out

    monkeypatch.setattr(ad, "sigmoid", broken_sigmoid)
    assert main(["grad-check"]) == 1
    out = capsys.readouterr().out
    assert "offending blocks:" in out and "init.b" in out.split("offending blocks:")[1]


# ---------------------------------------------------------------- ablation


def test_ablate_two_cells_and_repeat(tmp_path, small_scenes):
    base = tiny_run(small_scenes, max_steps=3)
    grid = {"pos_encoding": ["rays", "none"]}
    res = ablate_mod.ablate(base, grid, small_scenes, tmp_path / "a.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 3 and rows[0][0] == "pos_encoding" and "AP@250" in rows[0]
    assert all(len(r) == len(rows[0]) for r in rows)
    again = ablate_mod.ablate(base, {"pos_encoding": ["rays", "rays"]}, small_scenes, tmp_path / "b.csv")
    repeat = list(csv.reader(open(tmp_path / "b.csv")))
    assert repeat[1] == repeat[2] == rows[1]
    assert res[0]["steps"] == again[0]["steps"] == 3


def test_ablate_budget(tmp_path, small_scenes, data_file):
    with pytest.raises(ablate_mod.BudgetError):
        ablate_mod.ablate(tiny_run(small_scenes), {"K": [1, 2, 3], "L": [1, 2]}, small_scenes, tmp_path / "x.csv",
                          max_cells=5)
    assert main(["ablate", "--data", str(data_file), "--out", str(tmp_path / "x.csv"), "--K", "1,2,3",
                 "--max-cells", "4"]) == 2


# ---------------------------------------------------------------- estimator


def test_estimator_api(small_scenes):
    est = MvPEstimator(n_slots=2, channels=8, layers=2, points=2, heads=2, max_steps=3, lr=1e-3)
    params = est.get_params()
    assert params["channels"] == 8 and clone(est).get_params() == params
    with pytest.raises(Exception):
        est.predict(small_scenes)
    est.fit(small_scenes)
    assert est.n_iter_ == 3 and est.loss_curve_.shape == (3,)
    preds = est.predict(small_scenes)
    assert len(preds) == 4 and all(p.poses.shape[1:] == (5, 3) for p in preds)
    assert 0.0 <= est.score(small_scenes) <= 1.0
    with pytest.raises(ValueError):
        MvPEstimator(n_slots=1).fit(small_scenes)
    with pytest.raises(ValueError):
        est.set_params(confidence_threshold=2.0).fit(small_scenes)
