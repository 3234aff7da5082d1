import json

import numpy as np
import pytest

from tfsep.checkpoint import CheckpointError, load_archive, load_model, save_archive
from tfsep.layers import ParamStore
from tfsep.model import preset
from tfsep.optim import Adam, PlateauSchedule, clip_gradients, global_grad_norm
from tfsep.signal import StftConfig
from tfsep.synth import SceneConfig, build_dataset
from tfsep.train import TrainConfig, Trainer, TrainingDiverged


def store_with_grads(*grads):
    store = ParamStore()
    for i, g in enumerate(grads):
        store.add(f"p{i}", np.zeros(np.shape(g)))
        store.accumulate(f"p{i}", np.asarray(g, dtype=float))
    return store


# --- clipping ------------------------------------------------------------------

def test_clip_large_norm():
    store = store_with_grads([6.0, 8.0])
    assert clip_gradients(store, 5.0) == pytest.approx(0.5)
    assert abs(global_grad_norm(store) - 5.0) < 1e-9


def test_clip_small_norm_untouched():
    store = store_with_grads([0.0, 3.0])
    assert clip_gradients(store, 5.0) == 1.0
    np.testing.assert_array_equal(store.grad("p0"), [0.0, 3.0])


def test_clip_boundary_inclusive():
    store = store_with_grads([3.0, 0.0, 0.0], [0.0, 4.0, 0.0])
    assert clip_gradients(store, 5.0) == 1.0
    np.testing.assert_array_equal(store.grad("p1"), [0.0, 4.0, 0.0])


def test_clip_nan_names_tensor():
    store = store_with_grads([1.0], [np.nan])
    with pytest.raises(FloatingPointError, match="p1"):
        clip_gradients(store, 5.0)


def test_clip_property_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        store = store_with_grads(*(rng.standard_normal(rng.integers(1, 6)) * rng.uniform(0, 10) for _ in range(3)))
        clip_gradients(store, 5.0)
        assert global_grad_norm(store) <= 5.0 + 1e-9


# --- adam ----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    store = store_with_grads([1.0])
    Adam(store).step(store, 0.1)
    assert store["p0"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_gradient_no_move():
    store = ParamStore()
    store.add("w", np.array([1.5, -2.0]))
    opt = Adam(store)
    for _ in range(3):
        opt.step(store, 0.1)
    np.testing.assert_array_equal(store["w"], [1.5, -2.0])


def test_adam_deterministic_trajectories():
    def run():
        store = ParamStore()
        store.add("w", np.array([0.3, -0.7]))
        opt = Adam(store)
        path = []
        for k in range(5):
            store.zero_grad()
            store.accumulate("w", 2 * store["w"] + k)
            opt.step(store, 0.01)
            path.append(store["w"].copy())
        return np.array(path)

    assert np.array_equal(run(), run())


# --- schedule ------------------------------------------------------------------

def test_lr_halves_after_seven_non_improving_epochs():
    sched = PlateauSchedule(lr=1e-3)
    lrs = []
    sched.step(5.0)  # first epoch sets the baseline
    for _ in range(10):
        lrs.append(sched.lr)
        sched.step(5.0)
    # before the 7th non-improving epoch is seen, lr is untouched
    assert lrs[:7] == [1e-3] * 7
    assert lrs[7] == 5e-4
    assert sched.since_best == 10


def test_stop_after_fifteen_non_improving_epochs():
    sched = PlateauSchedule(lr=1e-3)
    sched.step(1.0)
    events = [sched.step(2.0) for _ in range(15)]
    assert [e["stop"] for e in events] == [False] * 14 + [True]
    assert sched.lr == pytest.approx(1e-3 * 0.25)


def test_improvement_resets_counters_and_lr_is_monotone():
    sched = PlateauSchedule(lr=1e-3)
    script = [5, 5, 5, 5, 5, 5, 5, 5, 4, 4, 4, 3] + [3] * 20
    lrs = []
    for v in script:
        lrs.append(sched.lr)
        ev = sched.step(float(v))
        if ev["improved"]:
            assert sched.since_best == 0 and sched.since_cut == 0
        if ev["stop"]:
            break
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    ratios = {b / a for a, b in zip(lrs, lrs[1:]) if b != a}
    assert ratios == {0.5}
    assert sched.stopped


def test_tie_is_not_improvement():
    sched = PlateauSchedule()
    sched.step(1.0)
    assert not sched.step(1.0)["improved"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stop_patience=3)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


# --- checkpoints ---------------------------------------------------------------

def test_archive_round_trip_and_checksum(tmp_path):
    sections = {"params": {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, "buffers": {"b": np.ones(2)}}
    save_archive(tmp_path / "x.ckpt", sections, {"k": 1})
    back, meta = load_archive(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    np.testing.assert_array_equal(back["params"]["a"], sections["params"]["a"])
    raw = bytearray((tmp_path / "x.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "y.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_archive(tmp_path / "y.ckpt")
    (tmp_path / "z.ckpt").write_bytes(b"nope" * 4)
    with pytest.raises(CheckpointError, match="magic"):
        load_archive(tmp_path / "z.ckpt")


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = SceneConfig(clip_seconds=0.25, seed=1)
    return build_dataset(cfg, {"train": 4, "val": 2, "test": 1}, root)


def tiny_trainer(out, **kw):
    mc = preset("gradcheck", dropout_rate=0.1)
    return Trainer(mc, TrainConfig(batch_size=2, seed=3, **kw), StftConfig(256, 128), out)


def test_resume_is_bit_exact(tiny_data, tmp_path):
    straight = tiny_trainer(tmp_path / "a")
    straight.fit(tiny_data, epochs=3)

    part = tiny_trainer(tmp_path / "b")
    part.fit(tiny_data, epochs=1)
    resumed = Trainer.resume(tmp_path / "b" / "last.ckpt")
    resumed.fit(tiny_data, epochs=2)

    assert resumed.epoch == straight.epoch == 3
    for name in straight.store.names():
        assert np.array_equal(straight.store[name], resumed.store[name]), name
    for name in straight.adam.m:
        assert np.array_equal(straight.adam.m[name], resumed.adam.m[name])
    assert [h["val_loss"] for h in straight.history] == [h["val_loss"] for h in resumed.history]


def test_training_writes_metrics_and_checkpoints(tiny_data, tmp_path):
    tr = tiny_trainer(tmp_path)
    tr.fit(tiny_data, epochs=2)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "val_loss", "val_si_sdri", "val_sdri", "wall_time"}
    store, model, meta = load_model(tmp_path / "best.ckpt")
    assert meta["model"]["D"] == 8 and model.cfg.M == 2
    assert (tmp_path / "last.ckpt").exists()


def test_divergence_aborts_with_checkpoint_hint(tiny_data, tmp_path):
    tr = tiny_trainer(tmp_path)
    tr.fit(tiny_data, epochs=1)
    tr.store["encoder.weight"] = np.full_like(tr.store["encoder.weight"], np.nan)
    with pytest.raises(TrainingDiverged, match="last.ckpt"):
        tr.fit(tiny_data, epochs=1)
    assert (tmp_path / "last.ckpt").exists()
