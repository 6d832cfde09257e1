import json

import numpy as np
import pytest

import dsconv


def reference_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    e = (h + 2 * pad - r) // stride + 1
    f = (wd + 2 * pad - s) // stride + 1
    out = np.zeros((n, k, e, f))
    for i in range(r):
        for j in range(s):
            patch = xp[:, :, i : i + stride * e : stride, j : j + stride * f : stride]
            out += np.einsum("nchw,kc->nkhw", patch, w[:, :, i, j].astype(np.float64))
    return out + b[None, :, None, None]


def rel(a, ref):
    return np.max(np.abs(a - ref)) / np.max(np.abs(ref))


@pytest.fixture
def layer():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 5, 9, 9)).astype(np.float32)
    w = rng.standard_normal((7, 5, 3, 3)).astype(np.float32)
    w[rng.random(w.shape) < 0.8] = 0.0
    b = rng.standard_normal(7).astype(np.float32)
    return x, w, b


def test_three_algorithms_agree_with_numpy(layer):
    x, w, b = layer
    ref = reference_conv(x, w, b, 1, 1)
    for fn in (dsconv.conv_dense_direct, dsconv.conv_dense_gemm, dsconv.conv_sparse):
        y = fn(x, w, list(b), stride=1, padding=1)
        assert y.shape == ref.shape
        assert rel(y, ref) < 1e-4
    for sb in (1, 2, 4, 8, 16):
        y = dsconv.conv_sparse(x, w, list(b), stride=1, padding=1, sub_batch_size=sb)
        assert np.array_equal(y, dsconv.conv_sparse(x, w, list(b), stride=1, padding=1, sub_batch_size=1))


def test_half_profile(layer):
    x, w, b = layer
    ref = reference_conv(x, w, b, 1, 1)
    y = dsconv.conv_sparse(x, w, list(b), stride=1, padding=1, dtype="f16")
    assert rel(y, ref) < 1e-2


def test_csr_round_trip(layer):
    _, w, _ = layer
    csr = dsconv.build_csr(w, 9, 9, padding=1)
    rowptr = np.array(csr["rowptr"])
    assert np.all(np.diff(rowptr) == csr["sparse_level"])
    assert np.array_equal(csr["decompressed"], w)
    assert len(csr["values"]) == len(csr["colidx"]) == rowptr[-1]


def test_errors_map_to_exceptions(layer):
    x, w, b = layer
    with pytest.raises(dsconv.ShapeError):
        dsconv.conv_sparse(x[:, :4], w, list(b))
    with pytest.raises(dsconv.ArgumentError):
        dsconv.conv_sparse(x, w, list(b), padding=1, sub_batch_size=3)
    with pytest.raises(dsconv.ArgumentError):
        dsconv.preset_layers("alexnet")
    assert issubclass(dsconv.FormatError, dsconv.Error)


def test_quantizers():
    p = dsconv.fit_fixed_point([1.5, -0.2], 8)
    assert (p["int_bits"], p["frac_bits"]) == (1, 6)
    q, saturated = dsconv.quantize_fixed([0.3, 1.5], 8)
    assert q[0] == 0.296875 and saturated == 0
    cb = dsconv.build_codebook([1.0, 2.0, 1.0, 2.0], 2)
    assert cb["decoded"] == [1.0, 2.0, 1.0, 2.0]


def test_presets():
    assert set(dsconv.preset_names()) == {"vgg16", "resnet-1x1", "densenet-1x1", "cnn-non-static"}
    sp = sorted({l["sparsity"] for l in dsconv.preset_layers("cnn-non-static")})
    assert sp == [0.77, 0.83, 0.875]
    rows = dsconv.bench_preset_layer("cnn-non-static", dsconv.preset_layers("cnn-non-static")[0]["name"], batch=2)
    assert {r["status"] for r in rows} == {"ok"}


def test_prune_and_infer(tmp_path):
    cfg = {
        "data": {"samples": 200, "height": 8, "width": 8},
        "network": {"convs": [[6, 3, 1, 1], [8, 2, 2, 0]]},
        "baseline": {"epochs": 2},
        "prune": {"iter_nr": 2, "pool_size": 2, "batch_nr": 1, "batch_size": 16},
    }
    out = tmp_path / "model"
    res = dsconv.prune(json.dumps(cfg), str(out))
    assert 0.0 <= res["accuracy"] <= 1.0
    summary = dsconv.model_summary(str(out))
    assert [l["name"] for l in summary["layers"]] == ["conv0", "conv1"]
    x = dsconv.load_tensor(str(out / "validation.bin"))
    logits = dsconv.infer(str(out), x)
    assert logits.shape == (x.shape[0], summary["classes"])
    with pytest.raises(dsconv.Error):
        dsconv.model_summary(str(tmp_path))
