"""Model file container: round trips, strictness, corruption handling."""

import numpy as np
import pytest

from qana.arch import QanaConfig, build_qana
from qana.convert import fold_batchnorm
from qana.errors import ModelFileError
from qana.modelfile import MAGIC, VERSION, load_model, save_model
from qana.train import forward_logits


@pytest.fixture(scope="module")
def built():
    cfg = QanaConfig(input_shape=(16, 16, 3), block_channels=(4, 6),
                     head_channels=8, num_classes=3, se_reduction=4)
    model, params = build_qana(cfg, np.random.default_rng(5))
    return cfg, model, params


def test_round_trip_bitwise(built, tmp_path):
    cfg, model, params = built
    meta = {"stage": "train", "seed": 7, "val_accuracy": 0.93}
    p = tmp_path / "m.qana"
    save_model(p, model, params, meta)
    model2, params2, meta2 = load_model(p)
    assert model2.config == cfg
    assert meta2 == meta
    assert set(params2) == set(params)
    for k in params:
        assert params2[k].dtype == np.float32
        assert np.array_equal(params2[k], params[k])
    assert [(l.kind, l.name, l.meta) for l in model2.layers] == \
           [(l.kind, l.name, l.meta) for l in model.layers]


def test_save_is_deterministic(built, tmp_path):
    _, model, params = built
    a, b = tmp_path / "a.qana", tmp_path / "b.qana"
    save_model(a, model, params, {"z": 1, "a": 2})
    save_model(b, model, params, {"a": 2, "z": 1})
    assert a.read_bytes() == b.read_bytes()


def test_reloaded_model_runs_identically(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    model2, params2, _ = load_model(p)
    x = np.random.default_rng(9).random((4, 16, 16, 3)).astype(np.float32)
    y1 = forward_logits(model, params, x)
    y2 = forward_logits(model2, params2, x)
    assert np.array_equal(y1, y2)


def test_folded_model_round_trips(built, tmp_path):
    _, model, params = built
    folded, fparams = fold_batchnorm(model, params)
    p = tmp_path / "folded.qana"
    save_model(p, folded, fparams)
    model2, params2, _ = load_model(p)
    assert [l.kind for l in model2.layers] == [l.kind for l in folded.layers]
    assert "block1.ghost.bias" in params2
    assert not any(".bn." in k for k in params2)
    x = np.random.default_rng(10).random((2, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(forward_logits(folded, fparams, x),
                          forward_logits(model2, params2, x))


def test_default_metadata_empty(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    _, _, meta = load_model(p)
    assert meta == {}


def test_loaded_params_writable(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    _, params2, _ = load_model(p)
    params2["classifier.b"][0] = 5.0  # must not raise


def test_non_float32_param_rejected(built, tmp_path):
    _, model, params = built
    bad = dict(params)
    bad["classifier.b"] = params["classifier.b"].astype(np.float64)
    with pytest.raises(ModelFileError, match="classifier.b"):
        save_model(tmp_path / "m.qana", model, bad)


def test_bad_magic(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    blob = bytearray(p.read_bytes())
    blob[:4] = b"NOPE"
    p.write_bytes(bytes(blob))
    with pytest.raises(ModelFileError, match="magic"):
        load_model(p)


def test_future_version_refused(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    blob = bytearray(p.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(blob))
    with pytest.raises(ModelFileError, match="version 99"):
        load_model(p)
    assert VERSION == 1 and MAGIC == b"QANA"


@pytest.mark.parametrize("keep", [6, 60, 0.4, 0.97])
def test_truncation_detected(built, tmp_path, keep):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    blob = p.read_bytes()
    cut = keep if isinstance(keep, int) else int(len(blob) * keep)
    p.write_bytes(blob[:cut])
    with pytest.raises(ModelFileError, match="truncated"):
        load_model(p)


def test_trailing_garbage_detected(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    p.write_bytes(p.read_bytes() + b"\x00\x01")
    with pytest.raises(ModelFileError, match="trailing"):
        load_model(p)


def test_corrupt_config_block(built, tmp_path):
    _, model, params = built
    p = tmp_path / "m.qana"
    save_model(p, model, params)
    blob = bytearray(p.read_bytes())
    blob[12] ^= 0xFF  # first byte of the config JSON
    p.write_bytes(bytes(blob))
    with pytest.raises(ModelFileError, match="JSON"):
        load_model(p)


def test_missing_file(tmp_path):
    with pytest.raises(ModelFileError, match="missing"):
        load_model(tmp_path / "nothing.qana")
