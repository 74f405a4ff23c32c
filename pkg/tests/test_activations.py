import numpy as np
import pytest

from transferrisk import activations as A
from transferrisk import similarity as S
from transferrisk import zoo
from transferrisk.errors import ConfigError, FormatError, ShapeError


@pytest.fixture(scope="module")
def probes(blobs):
    return A.make_probe_set(blobs, 60, 3, "p60")


def test_capture_deterministic(blob_models, probes):
    a = A.capture(blob_models["target"], probes)
    b = A.capture(blob_models["target"], probes)
    assert [m.layer_index for m in a] == [m.layer_index for m in b]
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_one_hidden_layer_gives_two_matrices(blob_models, probes):
    mats = A.capture(blob_models["wide"], probes)
    assert len(mats) == 2
    assert [m.layer_index for m in mats] == [1, 2]
    assert mats[0].data.min() >= 0
    assert mats[1].data.shape == (60, 3)


def test_layer_indices_increase(blob_models, probes):
    idx = [m.layer_index for m in A.capture(blob_models["target"], probes)]
    assert idx == sorted(set(idx))


def test_conv_capture_layout():
    model = zoo.untrained(zoo.convnet("c", (1, 8, 8), 10, ((2, 3),), (4,), 1))
    ds = zoo.generate_dataset("digits8x8", 300, 10, 0)
    probes = A.make_probe_set(ds, 50, 1)
    mats = A.capture(model, probes)
    _, raw = zoo.forward(model, probes.inputs)
    assert mats[0].data.shape == (50, 2 * 6 * 6)
    # row-major (channel, height, width)
    w, b = model.params[0]
    img = probes.inputs[0].reshape(8, 8)
    v = max(0.0, float(np.sum(img[2:5, 1:4] * w[1, 0]) + b[1]))
    assert mats[0].data[0, 1 * 36 + 2 * 6 + 1] == pytest.approx(v, abs=1e-12)


def test_probe_set_rules(blobs):
    with pytest.raises(ConfigError):
        A.make_probe_set(blobs, 40, 0)
    with pytest.raises(ConfigError):
        A.make_probe_set(blobs, 10_000, 0)
    a, b = A.make_probe_set(blobs, 50, 8), A.make_probe_set(blobs, 50, 8)
    assert np.array_equal(a.inputs, b.inputs)
    test_x = blobs.test()[0]
    assert all(any(np.array_equal(p, t) for t in test_x) for p in a.inputs[:5])


def test_shape_mismatch(blobs):
    model = zoo.untrained(zoo.mlp("m", 4, 3, (4,)))
    with pytest.raises(ShapeError):
        A.capture(model, A.make_probe_set(blobs, 50, 0))


def test_amat_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(7, 5))
    m = A.ActivationMatrix("model-x", 3, "probe-ü", data)
    A.save_amat(m, tmp_path / "m.amat")
    back = A.load_amat(tmp_path / "m.amat")
    assert (back.model_id, back.layer_index, back.probe_set_id) == ("model-x", 3, "probe-ü")
    assert np.array_equal(back.data, data.astype(np.float32).astype(np.float64))
    assert A.amat_to_bytes(back) == (tmp_path / "m.amat").read_bytes()


def test_amat_file_length():
    m = A.ActivationMatrix("m", 0, "p", np.arange(6.0).reshape(3, 2))
    # magic 4 + version 1 + dtype 1 + rows 4 + cols 4 + (4 + 1) + layer 4 + (4 + 1)
    header = 4 + 1 + 1 + 4 + 4 + 5 + 4 + 5
    raw = A.amat_to_bytes(m)
    assert header == 28
    assert len(raw) == header + 24
    assert raw[:6] == b"AMAT\x01\x01"
    assert raw[6:14] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[28:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_amat_format_errors():
    raw = A.amat_to_bytes(A.ActivationMatrix("m", 0, "p", np.ones((3, 2))))
    with pytest.raises(FormatError) as err:
        A.amat_from_bytes(b"BMAT" + raw[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        A.amat_from_bytes(raw[:-5])
    assert err.value.offset == 28
    huge = raw[:6] + (2**31).to_bytes(4, "little") + raw[10:]
    with pytest.raises(FormatError) as err:
        A.amat_from_bytes(huge)
    assert err.value.offset == 6


def test_csv_ingest(tmp_path):
    (tmp_path / "a.csv").write_text("1.5,2\n3,4.25\n")
    m = A.load_csv(tmp_path / "a.csv", "ext", 2, "p")
    assert m.data.tolist() == [[1.5, 2.0], [3.0, 4.25]]
    assert (m.model_id, m.layer_index) == ("ext", 2)


def test_saved_activations_preserve_cka(blob_models, probes, tmp_path):
    a = A.capture(blob_models["target"], probes)
    b = A.capture(blob_models["wide"], probes)
    for i, m in enumerate(a + b):
        A.save_amat(m, tmp_path / f"{i}.amat")
    loaded = [A.load_amat(tmp_path / f"{i}.amat") for i in range(len(a) + len(b))]
    la, lb = loaded[:len(a)], loaded[len(a):]
    for x, xl in zip(a, la):
        for y, yl in zip(b, lb):
            assert abs(S.cka(x, y).score - S.cka(xl, yl).score) <= 1e-6
