import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from bootmae.config import toy_config
from bootmae.data import (Dataset, SynthSpec, augment, load_images, read_pnm, save_dataset,
                          synth_dataset, train_test, write_pnm)
from bootmae.evaluate import (evaluate, finetune, init_finetune, init_head, layer_scales,
                              linear_probe)
from bootmae.exceptions import ContractError, ImageFileError
from bootmae.model import BootMAEModel


# data ------------------------------------------------------------------------

def test_synth_is_deterministic_and_balanced():
    a, b = synth_dataset(SynthSpec(n=24), 3), synth_dataset(SynthSpec(n=24), 3)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [6, 6, 6, 6]
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert synth_dataset(SynthSpec(num_classes=1, n=4)).num_classes == 1


def test_train_and_test_differ():
    train, test = train_test(4, 16, 16, 16, 3, seed=0)
    assert not np.array_equal(train.images, test.images)
    assert test.split == "test"


def test_pixel_linear_baseline_is_not_perfect():
    train, test = train_test(4, 256, 256, 16, 3, seed=0)
    clf = LogisticRegression(max_iter=2000).fit(train.images.reshape(256, -1), train.labels)
    assert clf.score(test.images.reshape(256, -1), test.labels) < 0.95


def test_augment_preserves_shape_and_content(rng):
    images = synth_dataset(SynthSpec(n=4)).images
    out = augment(images, rng, 0)
    for o, i in zip(out, images):
        assert np.array_equal(o, i) or np.array_equal(o, i[:, ::-1])
    assert augment(images, rng, 4).shape == images.shape


def test_pnm_round_trip(tmp_path, rng):
    for C in (1, 3):
        img = np.round(rng.random((5, 7, C)) * 255) / 255
        write_pnm(tmp_path / "x.pnm", img)
        np.testing.assert_allclose(read_pnm(tmp_path / "x.pnm"), img, atol=1e-7)


def test_pnm_header_comments_and_16bit(tmp_path):
    data = np.array([[0, 1000], [65535, 7]], dtype=">u2")
    (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + data.tobytes())
    np.testing.assert_allclose(read_pnm(tmp_path / "a.pgm")[..., 0], data / 65535)


@pytest.mark.parametrize("payload", [b"P7\n2 2\n255\n" + bytes(4), b"P5\n2 2\n255\n" + bytes(3),
                                     b"P5\n2\n", b"P5\n-2 2\n255\n" + bytes(4)])
def test_malformed_pnm(tmp_path, payload):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(ImageFileError):
        read_pnm(tmp_path / "bad.pgm")


def test_dataset_directory_round_trip(tmp_path):
    ds = synth_dataset(SynthSpec(n=6, channels=1))
    save_dataset(ds, tmp_path)
    back = load_images(tmp_path, standardize_channels=False)
    np.testing.assert_allclose(back.images, np.round(ds.images * 255) / 255, atol=1e-6)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_all_zero_images_standardize_to_zero(tmp_path):
    for i in range(3):
        write_pnm(tmp_path / f"{i}.pgm", np.zeros((4, 4)))
    ds = load_images(tmp_path)
    assert np.all(ds.images == 0) and np.isfinite(ds.images).all()


def test_mixed_extents_listed(tmp_path):
    write_pnm(tmp_path / "a.pgm", np.zeros((4, 4)))
    write_pnm(tmp_path / "b.pgm", np.zeros((4, 6)))
    with pytest.raises(ImageFileError, match="a.pgm.*b.pgm"):
        load_images(tmp_path)


def test_labels_must_cover_every_image_and_class(tmp_path):
    for i in range(2):
        write_pnm(tmp_path / f"{i}.pgm", np.zeros((4, 4)))
    (tmp_path / "labels.csv").write_text("filename,class\n0.pgm,0\n")
    with pytest.raises(ImageFileError, match="1.pgm"):
        load_images(tmp_path)
    (tmp_path / "labels.csv").write_text("0.pgm,0\n1.pgm,2\n")
    with pytest.raises(ImageFileError, match="missing"):
        load_images(tmp_path)


# evaluation ------------------------------------------------------------------

def _data(n=16):
    return train_test(4, n, n, 16, 3, seed=0)


def test_head_parameter_count():
    head = init_head(32, 4)
    assert sum(p.size for p in head.values()) == 32 * 4 + 4


def test_zero_lr_finetune_is_chance(toy_model_cfg):
    train, test = _data()
    cfg = toy_config(eval_lr=0.0, eval_epochs=1)
    state = finetune(BootMAEModel(toy_model_cfg, seed=0), train, test, cfg)
    # zero head: all logits tie, argmax picks class 0
    assert state.metrics[-1]["top1"] == pytest.approx(np.mean(test.labels == 0))
    assert state.metrics[-1]["loss"] == pytest.approx(np.log(4), rel=1e-6)


def test_finetune_never_touches_source_model(toy_model_cfg):
    train, test = _data()
    model = BootMAEModel(toy_model_cfg, seed=0)
    snapshot = {k: v.data.copy() for k, v in model.params.items()}
    finetune(model, train, test, toy_config(eval_epochs=2))
    assert all(np.array_equal(snapshot[k], v.data) for k, v in model.params.items())


def test_finetune_is_seed_deterministic(toy_model_cfg):
    train, test = _data()
    runs = [finetune(BootMAEModel(toy_model_cfg, seed=0), train, test, toy_config(eval_epochs=2)).metrics
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_layer_decay_factors(toy_model_cfg):
    model = BootMAEModel(toy_model_cfg, seed=0)
    state = init_finetune(model, toy_config(), 4)
    scales = layer_scales(state.params, 2, 0.65)
    assert scales["head.w"] == 1.0
    assert scales["encoder.norm.g"] == 1.0
    assert scales["encoder.blocks.1.attn.q.w"] == pytest.approx(0.65)
    assert scales["encoder.blocks.0.attn.q.w"] == pytest.approx(0.65 ** 2)
    assert scales["encoder.patch.w"] == pytest.approx(0.65 ** 3)


def test_probe_freezes_encoder_and_learns(toy_model_cfg):
    train, test = _data(32)
    model = BootMAEModel(toy_model_cfg, seed=0)
    snapshot = {k: v.data.copy() for k, v in model.params.items()}
    result = linear_probe(model, train, test, toy_config(probe_epochs=20).train)
    assert all(np.array_equal(snapshot[k], v.data) for k, v in model.params.items())
    assert result.num_parameters == 32 * 4 + 4
    train_acc = [m["top1"] for m in result.metrics if m["split"] == "train"]
    assert train_acc[-1] > 0.25


def test_unlabelled_data_rejected(toy_model_cfg):
    train, _ = _data()
    with pytest.raises(ContractError):
        linear_probe(BootMAEModel(toy_model_cfg), Dataset(train.images), None, toy_config().train)


def test_evaluate_full_images(toy_model_cfg):
    _, test = _data()
    top1, loss = evaluate(BootMAEModel(toy_model_cfg), init_head(32, 4), test)
    assert 0 <= top1 <= 1 and loss == pytest.approx(np.log(4), rel=1e-6)
