import numpy as np
import pytest

from bootmae import checkpoint as ckpt
from bootmae import engine
from bootmae.config import (ModelConfig, RunConfig, from_mapping, load_config, parse_config_text,
                            toy_config)
from bootmae.data import SynthSpec, synth_dataset
from bootmae.exceptions import CheckpointError, ConfigError
from bootmae.masking import random_mask
from bootmae.momentum import init_shadow


def _images(n=8, seed=0):
    return synth_dataset(SynthSpec(n=n), seed=seed).images


def _cfg(**kw):
    return toy_config(**{"epochs": 2, "batch_size": 4, **kw})


def _forward(model, images):
    plans = [random_mask(16, 0.75, np.random.default_rng(i)) for i in range(len(images))]
    art = model.forward(images, plans)
    return [art.z_hat.data, art.x_bar.data, art.f_bar.data]


# config ----------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = toy_config(momentum_end=1.0, clip_grad=3.0, mask="random")
    assert from_mapping(parse_config_text(cfg.dumps())) == cfg


def test_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        from_mapping({"colour": "red"})
    with pytest.raises(ConfigError):
        from_mapping({"epochs": "many"})
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=5)
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nepochs = 3  # trailing\nmask=random\n")
    cfg = load_config(f, {"seed": 4})
    assert (cfg.train.epochs, cfg.model.mask, cfg.train.seed) == (3, "random", 4)


def test_block_bounds_scale_with_grid():
    assert ModelConfig(img_size=224, patch_size=16).block_bounds() == (16, 60)
    assert ModelConfig().block_bounds() == (1, 5)


def test_no_objective_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(pixel_loss=False, lam=0.0)


# training --------------------------------------------------------------------

def test_runs_are_deterministic(tmp_path):
    images = _images()
    paths = []
    for i in range(2):
        state = engine.pretrain(images, engine.init_state(_cfg()))
        paths.append(tmp_path / f"m{i}.csv")
        engine.write_metrics(state.metrics, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert len(paths[0].read_text().splitlines()) == 1 + 2 * 2


def test_seed_changes_run():
    images = _images()
    a = engine.pretrain(images, engine.init_state(_cfg(seed=0))).metrics
    b = engine.pretrain(images, engine.init_state(_cfg(seed=1))).metrics
    assert a != b


def test_metrics_are_finite_and_consistent():
    state = engine.pretrain(_images(), engine.init_state(_cfg(lam=0.5)))
    for row in state.metrics:
        assert np.isfinite([row["L_R"], row["L_P"], row["L"]]).all()
        assert abs(row["L"] - (row["L_R"] + 0.5 * row["L_P"])) < 1e-12
    assert [r["step"] for r in state.metrics] == [1, 2, 3, 4]


def test_feature_only_and_random_uninjected_variants():
    for over in (dict(pixel_loss=False), dict(lam=0.0, mask="random", reg_inject="none",
                                              pred_inject="none")):
        state = engine.pretrain(_images(), engine.init_state(_cfg(**over)))
        assert all(np.isfinite(r["L"]) for r in state.metrics)


def test_step_order_ema_uses_updated_weights():
    images = _images(4)
    state = engine.init_state(_cfg(momentum_start=0.5, momentum_mid=0.5))
    before = {k: v.copy() for k, v in state.shadow.items()}
    engine.train_step(state, images, 1e-3, 0.0)
    for k, s in state.shadow.items():
        live = state.model.params[k].data
        np.testing.assert_allclose(s, 0.5 * before[k] + 0.5 * live, rtol=1e-6, atol=1e-7)


def test_optimizer_never_holds_shadow():
    state = engine.pretrain(_images(4), engine.init_state(_cfg(epochs=1)))
    assert set(state.adam.m) <= set(state.model.params)
    assert all(state.shadow[k] is not state.model.params[k].data for k in state.shadow)


# checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    images = _images()
    state = engine.pretrain(images, engine.init_state(_cfg()))
    path = tmp_path / "a.ckpt"
    engine.save_checkpoint(state, path)
    loaded = engine.load_checkpoint(path)
    for a, b in zip(_forward(state.model, images[:2]), _forward(loaded.model, images[:2])):
        assert np.array_equal(a, b)
    assert loaded.step == state.step and loaded.metrics == state.metrics
    for k in state.shadow:
        assert np.array_equal(loaded.shadow[k], state.shadow[k])


def test_split_run_equals_unbroken_run(tmp_path):
    images = _images()
    full = engine.pretrain(images, engine.init_state(_cfg(epochs=3)))
    half = engine.pretrain(images, engine.init_state(_cfg(epochs=3)), epochs=1)
    engine.save_checkpoint(half, tmp_path / "h.ckpt")
    resumed = engine.pretrain(images, engine.load_checkpoint(tmp_path / "h.ckpt"))
    assert resumed.metrics == full.metrics
    for k, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data)


def test_truncated_checkpoint_rejected(tmp_path):
    state = engine.init_state(_cfg())
    path = tmp_path / "a.ckpt"
    engine.save_checkpoint(state, path)
    data = path.read_bytes()
    for cut in (4, 40, len(data) // 2, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            engine.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        engine.load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        engine.load_checkpoint(tmp_path / "m.ckpt")


def test_shape_mismatch_lists_entries(tmp_path):
    path = tmp_path / "a.ckpt"
    ckpt.write_container(path, {"k": 1}, {"a": np.zeros((2, 3), np.float32), "c": np.zeros(1, np.float32)})
    _, arrays = ckpt.read_container(path)
    with pytest.raises(CheckpointError, match=r"a.*\(2, 3\)") as exc:
        ckpt.check_shapes({"a": (3, 2), "b": (1,)}, arrays, path)
    assert "b" in str(exc.value) and "c" in str(exc.value)


def test_container_preserves_arrays(tmp_path, rng):
    arrays = {"x": rng.standard_normal((2, 3, 4)).astype(np.float32), "s": np.float32([7.0])}
    ckpt.write_container(tmp_path / "c", {"note": "hi"}, arrays)
    header, back = ckpt.read_container(tmp_path / "c")
    assert header["note"] == "hi"
    for k in arrays:
        assert np.array_equal(arrays[k], back[k])


def test_encoder_geometry_checked(tmp_path):
    state = engine.init_state(_cfg())
    engine.save_checkpoint(state, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="patch_size"):
        engine.load_encoder(tmp_path / "a.ckpt", ModelConfig(patch_size=8))
