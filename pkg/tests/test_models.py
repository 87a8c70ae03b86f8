import numpy as np
import pytest

from csilab.models import (
    CONVCSINET,
    SHUFFLECSINET,
    ModelGraph,
    ModelSpec,
    load_weights,
    save_weights,
)
from csilab.tensor import FormatError, ShapeError

ARCHS = [CONVCSINET, SHUFFLECSINET]
CRS = [16, 32]


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("cr", CRS)
def test_codec_shapes(arch, cr, rng):
    spec = ModelSpec(architecture=arch, cr_den=cr)
    model = ModelGraph(spec, seed=0)
    x = rng.random((3, 2, 32, 32), dtype=np.float32)
    code = model.encode(x)
    m = 2 * 32 * 32 // cr
    assert code.shape == (3, m // 4, 2, 2)
    x_hat = model.decode(code)
    assert x_hat.shape == (3, 2, 32, 32)
    assert np.all((x_hat > 0) & (x_hat < 1))  # sigmoid range


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(architecture="plain_mlp")
    with pytest.raises(ValueError):
        ModelSpec(nc_prime=20)  # not a power of two
    with pytest.raises(ValueError):
        ModelSpec(cr_den=3000)  # codeword collapses below one channel group


def test_codeword_lengths():
    assert ModelSpec(cr_den=16).codeword_len == 128
    assert ModelSpec(cr_den=16).codeword_channels == 32
    assert ModelSpec(cr_den=32).codeword_len == 64
    assert ModelSpec(cr_den=32).codeword_channels == 16


def test_input_shape_rejected(rng):
    model = ModelGraph(ModelSpec(), seed=0)
    with pytest.raises(ShapeError):
        model.encode(rng.random((2, 2, 16, 16), dtype=np.float32))
    with pytest.raises(ShapeError):
        model.decode(rng.random((2, 7, 2, 2), dtype=np.float32))


def test_trainer_and_codec_tapes_agree(rng):
    """The end-to-end tape reuses the same parameters as encode/decode."""
    model = ModelGraph(ModelSpec(architecture=SHUFFLECSINET), seed=3)
    x = rng.random((2, 2, 32, 32), dtype=np.float32)
    model.trainer.forward({"x": x, "target": x}, mode="infer")
    pred = model.trainer.value(model.trainer_pred_id)
    assert np.allclose(pred, model.reconstruct(x), atol=1e-6)
    code = model.trainer.value(model.trainer_codeword_id)
    assert np.allclose(code, model.encode(x), atol=1e-6)


def test_same_seed_same_init():
    a = ModelGraph(ModelSpec(), seed=5)
    b = ModelGraph(ModelSpec(), seed=5)
    for name in a.store.names():
        assert np.array_equal(a.store[name], b.store[name])
    c = ModelGraph(ModelSpec(), seed=6)
    assert any(
        not np.array_equal(a.store[name], c.store[name]) for name in a.store.trainable_names()
    )


@pytest.mark.parametrize("arch", ARCHS)
def test_weights_round_trip(arch, tmp_path, rng):
    model = ModelGraph(ModelSpec(architecture=arch, cr_den=32), seed=1)
    x = rng.random((2, 2, 32, 32), dtype=np.float32)
    before = model.reconstruct(x)
    path = tmp_path / "w.csiw"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.spec == model.spec
    for name in model.store.names():
        assert np.array_equal(loaded.store[name], model.store[name]), name
    assert np.array_equal(loaded.reconstruct(x), before)


def test_weights_spec_mismatch(tmp_path):
    model = ModelGraph(ModelSpec(architecture=CONVCSINET, cr_den=16), seed=0)
    path = tmp_path / "w.csiw"
    save_weights(model, path)
    with pytest.raises(FormatError, match="CR 1/16"):
        load_weights(path, spec=ModelSpec(architecture=CONVCSINET, cr_den=32))


def test_weights_corruption_detected(tmp_path):
    model = ModelGraph(ModelSpec(), seed=0)
    path = tmp_path / "w.csiw"
    save_weights(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"WXYZ"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_weights(path)


def test_weights_missing_parameter_named(tmp_path):
    model = ModelGraph(ModelSpec(), seed=0)
    path = tmp_path / "w.csiw"
    save_weights(model, path)
    raw = path.read_bytes()
    # drop the trailing entry; the loader must say which parameter is missing
    import struct

    count_off = struct.calcsize("<4sIIIIIIII")
    (count,) = struct.unpack_from("<I", raw, count_off)
    # walk entries to find the start of the last one
    off = count_off + 4
    last_start = off
    for _ in range(count):
        last_start = off
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4 + nlen
        shape = struct.unpack_from("<4I", raw, off)
        off += 16 + int(np.prod(shape)) * 4
    patched = bytearray(raw[:last_start])
    struct.pack_into("<I", patched, count_off, count - 1)
    path.write_bytes(bytes(patched))
    with pytest.raises(FormatError, match="missing parameter"):
        load_weights(path)


def test_encoder_output_is_half_by_half_feature_map():
    # four spatial halvings: 32 -> 16 -> 8 -> 4 -> 2 for both encoders
    for arch in ARCHS:
        model = ModelGraph(ModelSpec(architecture=arch), seed=0)
        code = model.encode(np.zeros((1, 2, 32, 32), dtype=np.float32))
        assert code.shape[2:] == (2, 2)


def test_batch_norm_training_changes_inference(rng):
    model = ModelGraph(ModelSpec(), seed=0)
    x = rng.random((4, 2, 32, 32), dtype=np.float32)
    y0 = model.reconstruct(x)
    model.trainer.forward({"x": x, "target": x}, mode="train")  # updates running stats
    y1 = model.reconstruct(x)
    assert not np.array_equal(y0, y1)
