import csv

import numpy as np
import pytest
import torch

from tenet.cli import main
from tenet.config import ConfigError, TrainConfig, read_config_file, split_config
from tenet.data import DatasetLayoutError, DatasetSpec, generate_synthetic_dataset, list_clips, load_clip
from tenet.excitation import curriculum_state
from tenet.harness import (
    CHECKPOINT_VERSION,
    CheckpointError,
    CheckpointVersionError,
    TrainingData,
    TrainingDiverged,
    _HEADER,
    build_model,
    cosine_lr,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    online_excitation,
    save_checkpoint,
    train,
)

TINY = dict(base_channels=8, level_channels=4, dilation_levels=2, image_size=(32, 32), checkpoint_every=0)


def tiny_config(root, out, **overrides):
    return TrainConfig(**{**TINY, "data_root": str(root), "out_dir": str(out), **overrides})


def silent(_):
    pass


@pytest.fixture(scope="module")
def tiny_run(synthetic_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    return train(tiny_config(synthetic_root, out, epochs=3), log=silent)


def _tensors(clip, dtype=torch.float32):
    frames = torch.from_numpy(clip.frames).permute(0, 3, 1, 2)[None].to(dtype)
    flows = torch.from_numpy(clip.flows).permute(0, 3, 1, 2)[None].to(dtype)
    return frames, flows


# ------------------------------------------------------------------ schedule


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 5e-4, 1e-6) == 5e-4
    assert abs(cosine_lr(99, 100, 5e-4, 1e-6) - 1e-6) <= 1e-9
    values = [cosine_lr(i, 100, 5e-4, 1e-6) for i in range(100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_last_logged_learning_rate_is_the_final_value(tiny_run):
    with open(tiny_run.log_path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "iter", "branch", "bce", "ssim", "iou", "total", "alpha", "lr"]
    assert abs(float(rows[-1]["lr"]) - 1e-6) <= 1e-9
    assert float(rows[0]["lr"]) == pytest.approx(5e-4)


def test_logged_alpha_follows_the_curriculum(synthetic_root, tmp_path):
    # batch_size 5 keeps one batch per kind per epoch, so 12 epochs stay cheap
    cfg = tiny_config(synthetic_root, tmp_path, epochs=12, batch_size=5, image_size=(16, 16))
    result = train(cfg, log=silent)
    with open(result.log_path) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        state = curriculum_state(int(row["epoch"]))
        assert float(row["alpha"]) == pytest.approx(state.alpha, abs=1e-6)
    stages = {s.epoch: s.stage for s in result.epochs}
    assert [stages[e] for e in (2, 3, 10, 11, 12)] == [1, 2, 2, 3, 3]
    assert result.record.stage == 3 and result.record.alpha == 0.0


def test_iterations_alternate_round_robin(tiny_run):
    with open(tiny_run.log_path) as fh:
        kinds = [row["branch"] for row in csv.DictReader(fh) if row["epoch"] == "1"]
    # 20 single frames in batches of 4 give 5 image and 5 flow batches; 5 clip windows give 5 video batches
    assert kinds == ["spatial-image", "temporal-flow", "full-video"] * 5


# --------------------------------------------------------------------- train


def test_three_default_epochs_strictly_decrease_the_loss(synthetic_root, tmp_path):
    result = train(TrainConfig(epochs=3, data_root=str(synthetic_root), out_dir=str(tmp_path)), log=silent)
    losses = [s.total for s in result.epochs]
    assert losses[0] > losses[1] > losses[2]


def test_seeded_training_is_byte_reproducible(synthetic_root, tmp_path):
    # the run directory is part of the config, so both runs share it
    cfg = tiny_config(synthetic_root, tmp_path / "run", epochs=2)
    a = train(cfg, log=silent)
    first, first_log = a.checkpoint.read_bytes(), a.log_path.read_bytes()
    b = train(cfg, log=silent)
    assert b.checkpoint.read_bytes() == first
    assert b.log_path.read_bytes() == first_log
    c = train(tiny_config(synthetic_root, tmp_path / "run", epochs=2, seed=1), log=silent)
    assert c.checkpoint.read_bytes() != first


def test_periodic_checkpoints(synthetic_root, tmp_path):
    train(tiny_config(synthetic_root, tmp_path, epochs=3, checkpoint_every=1, batch_size=5), log=silent)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt"]


def test_stop_hook_ends_training_early(synthetic_root, tmp_path):
    result = train(tiny_config(synthetic_root, tmp_path, epochs=5, batch_size=5), log=silent, stop=lambda s: s.epoch == 2)
    assert [s.epoch for s in result.epochs] == [1, 2]
    assert result.checkpoint.exists()


def test_excitation_off_trains_and_infers(synthetic_root, tmp_path):
    result = train(tiny_config(synthetic_root, tmp_path, epochs=1, excitation=False), log=silent)
    clip = load_clip(list_clips(synthetic_root)[0])
    maps = infer(result.record, clip, online_iters=2)
    assert maps.shape == (4, 64, 64)
    assert np.isfinite(maps).all()


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(DatasetLayoutError, match="does not exist"):
        train(tiny_config(tmp_path / "nowhere", tmp_path / "out"), log=silent)
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError, match="no clips"):
        train(tiny_config(tmp_path / "empty", tmp_path / "out"), log=silent)


def test_non_finite_loss_aborts_with_diagnostic(synthetic_root, tmp_path):
    cfg = tiny_config(synthetic_root, tmp_path, epochs=1)

    class Poisoned(TrainingData):
        def batches(self, epoch):
            out = super().batches(epoch)
            kind, (frames, flows, masks) = out[0]
            out[0] = (kind, (torch.full_like(frames, float("nan")), flows, masks))
            return out

    with pytest.raises(TrainingDiverged, match="non-finite spatial-image loss at epoch 1.*bce="):
        train(cfg, data=Poisoned(cfg), log=silent)


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-6, lr_final=1e-4)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tiny_run, synthetic_root, tmp_path):
    path = tmp_path / "copy.ckpt"
    save_checkpoint(tiny_run.record, path)
    loaded = load_checkpoint(path)
    assert loaded.fingerprint == tiny_run.record.fingerprint
    assert (loaded.epoch, loaded.alpha, loaded.stage) == (3, curriculum_state(3).alpha, 2)
    for key, value in tiny_run.record.model_state.items():
        assert torch.equal(value, loaded.model_state[key])
    momentum = tiny_run.record.optimizer_state["state"]
    assert momentum and all(
        torch.equal(v["momentum_buffer"], loaded.optimizer_state["state"][k]["momentum_buffer"]) for k, v in momentum.items()
    )
    frames, flows = _tensors(load_clip(list_clips(synthetic_root)[1]))
    frames, flows = (torch.nn.functional.interpolate(x[0], size=(32, 32), mode="bilinear")[None] for x in (frames, flows))
    a = model_from_checkpoint(tiny_run.record)(frames, flows).saliency_video
    b = model_from_checkpoint(loaded)(frames, flows).saliency_video
    assert torch.equal(a, b)


def test_truncated_checkpoint_fails_the_checksum(tiny_run, tmp_path):
    raw = tiny_run.checkpoint.read_bytes()
    for cut in (len(raw) - 1, len(raw) // 2, 10):
        path = tmp_path / f"cut{cut}.ckpt"
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)


def test_corrupted_payload_fails_the_checksum(tiny_run, tmp_path):
    raw = bytearray(tiny_run.checkpoint.read_bytes())
    raw[-100] ^= 0xFF
    path = tmp_path / "flipped.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_bumped_version_is_rejected(tiny_run, tmp_path):
    raw = bytearray(tiny_run.checkpoint.read_bytes())
    magic, version, length, digest = _HEADER.unpack_from(raw)
    raw[: _HEADER.size] = _HEADER.pack(magic, CHECKPOINT_VERSION + 1, length, digest)
    path = tmp_path / "future.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(path)


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"x" * 200)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


# ----------------------------------------------------------------- inference


@pytest.fixture(scope="module")
def eval_model(tiny_run):
    return model_from_checkpoint(tiny_run.record)


@pytest.fixture(scope="module")
def eval_clip(synthetic_root):
    frames, flows = _tensors(load_clip(list_clips(synthetic_root)[2]))
    return tuple(torch.nn.functional.interpolate(x[0], size=(32, 32), mode="bilinear")[None] for x in (frames, flows))


def test_zero_online_iterations_is_the_plain_forward(eval_model, eval_clip):
    frames, flows = eval_clip
    rounds = online_excitation(eval_model, frames, flows, 0)
    assert len(rounds) == 1
    with torch.no_grad():
        plain = eval_model(frames, flows, alpha=0.0, use_gt=False).saliency_video
    assert torch.equal(rounds[0], plain)


@pytest.mark.parametrize("mode", ["both", "spatial", "temporal"])
def test_online_rounds_are_deterministic(eval_model, eval_clip, mode):
    frames, flows = eval_clip
    a = online_excitation(eval_model, frames, flows, 4, mode)
    b = online_excitation(eval_model, frames, flows, 4, mode)
    assert len(a) == 5
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert all(r.min() >= 0 and r.max() <= 1 for r in a)


def test_first_round_uses_the_previous_video_map(eval_model, eval_clip):
    frames, flows = eval_clip
    rounds = online_excitation(eval_model, frames, flows, 1)
    prev = rounds[0]
    vf = eval_model.video_features(frames)
    with torch.no_grad():
        expected = eval_model.video_decode(vf, prev, prev)
    assert torch.equal(rounds[1], expected)


def test_fixed_point_persists(tiny_run, eval_clip):
    # a zeroed head makes every round return sigmoid(bias), so round 1 reproduces round 0
    model = model_from_checkpoint(tiny_run.record)
    with torch.no_grad():
        model.saliency_decoder.head.weight.zero_()
    rounds = online_excitation(model, *eval_clip, 5)
    assert torch.equal(rounds[1], rounds[0])
    assert all(torch.equal(r, rounds[0]) for r in rounds[2:])


def test_online_iteration_cap(tiny_run, synthetic_root):
    clip = load_clip(list_clips(synthetic_root)[0])
    with pytest.raises(ValueError, match="cap of 20"):
        infer(tiny_run.record, clip, online_iters=21)
    with pytest.raises(ValueError):
        infer(tiny_run.record, clip, online_iters=-1)
    assert infer(tiny_run.record, clip, online_iters=21, max_iters=21).shape == (4, 64, 64)


def test_unknown_online_mode(eval_model, eval_clip):
    with pytest.raises(ValueError, match="online mode"):
        online_excitation(eval_model, *eval_clip, 1, mode="video")


def test_infer_uses_no_ground_truth(tiny_run, synthetic_root):
    clip = load_clip(list_clips(synthetic_root)[3])
    blind = type(clip)(clip.frames, None, clip.flows, name=clip.name)
    assert np.array_equal(infer(tiny_run.record, clip, 3), infer(tiny_run.record, blind, 3))


def test_build_model_is_seeded():
    a = build_model(TrainConfig(**{**TINY, "seed": 3}))
    b = build_model(TrainConfig(**{**TINY, "seed": 3}))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# ----------------------------------------------------------------------- CLI


def _write_cfg(path, data, out, **extra):
    lines = [f"{k} = {v}" for k, v in {**TINY, "epochs": 1, "num_clips": 2, "data_root": data, "out_dir": out, **extra}.items()]
    path.write_text("\n".join(f"{line}".replace("(", "").replace(")", "") for line in lines) + "\n")


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    data, run = tmp_path / "d", tmp_path / "run"
    _write_cfg(cfg, data, run)
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert len(list_clips(data)) == 2
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = run / "final.ckpt"
    assert ckpt.exists() and (run / "loss_log.csv").exists()

    counts = {}
    for iters in (0, 20):
        out = tmp_path / f"pred{iters}"
        assert main(["infer", "--ckpt", str(ckpt), "--online-iters", str(iters), "--out", str(out)]) == 0
        counts[iters] = sorted(str(p.relative_to(out)) for p in out.rglob("*.png"))
    assert counts[0] == counts[20] and len(counts[0]) == 8

    report = tmp_path / "report.csv"
    assert main(["eval", "--pred", str(data), "--gt", str(data), "--out", str(report)]) == 0
    mean = report.read_text().splitlines()[-1].split(",")
    assert mean[0] == "mean" and float(mean[2]) == 0.0
    assert main(["eval", "--pred", str(tmp_path / "pred0"), "--gt", str(data)]) == 0
    assert "mean" in capsys.readouterr().out


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--ckpt" in capsys.readouterr().err


def test_cli_reports_failures(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["infer", "--ckpt", str(bad), "--out", str(tmp_path / "p")]) == 1
    assert "error:" in capsys.readouterr().err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 3\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "unknown keys" in capsys.readouterr().err
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path / "empty")]) == 1


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 4\nepochs = 2\nnum_clips = 3\nimage_size = 32x48\n")
    values = read_config_file(cfg)
    monkeypatch.delenv("TENET_SEED", raising=False)
    train_cfg, spec = split_config(values)
    assert train_cfg.seed == spec.seed == 4
    assert train_cfg.image_size == spec.image_size == (32, 48)
    monkeypatch.setenv("TENET_SEED", "9")
    assert split_config(values)[0].seed == 9
    assert split_config(values, seed=1)[0].seed == 1


def test_env_seed_changes_generated_data(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    _write_cfg(cfg, tmp_path / "unused", tmp_path / "run")
    monkeypatch.setenv("TENET_SEED", "5")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("TENET_SEED")
    assert main(["gen-data", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "flag")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "file")]) == 0
    env = sorted(p.read_bytes() for p in (tmp_path / "env").rglob("*.png"))
    flag = sorted(p.read_bytes() for p in (tmp_path / "flag").rglob("*.png"))
    file_ = sorted(p.read_bytes() for p in (tmp_path / "file").rglob("*.png"))
    assert env == flag != file_


def test_generation_matches_api(tmp_path):
    generate_synthetic_dataset(DatasetSpec(seed=2), tmp_path / "a")
    assert main(["gen-data", "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
