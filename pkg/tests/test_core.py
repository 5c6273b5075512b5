import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from uapkit.core import (ImageBatch, Perturbation, PixelRange, apply_perturbation, perturbation_l2,
                         project_to_ball, read_uapf, read_uapf_raw, write_uapf)

finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@pytest.mark.parametrize("value, expected", [(15.0, 10.0), (-12.0, -10.0), (3.5, 3.5)])
def test_project_examples(value, expected):
    assert project_to_ball(torch.tensor([value]), 10.0).item() == expected


def test_project_rejects_nonfinite_and_names_index():
    delta = torch.zeros(2, 3, 1)
    delta[1, 2, 0] = float("nan")
    with pytest.raises(ValueError, match=r"\(1, 2, 0\)"):
        project_to_ball(delta, 10.0)


def test_project_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        project_to_ball(torch.zeros(1), 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
              elements=finite),
       st.floats(1e-3, 100))
def test_project_bound_idempotent_and_interior_fixed(delta, eps):
    d = torch.from_numpy(delta)
    once = project_to_ball(d, eps)
    assert float(once.abs().max()) <= eps
    assert torch.equal(project_to_ball(once, eps), once)
    inside = d.double().abs() <= eps
    assert torch.equal(once[inside], d[inside])


def test_pixel_range_validation():
    assert PixelRange() == PixelRange(0.0, 255.0)
    with pytest.raises(ValueError):
        PixelRange(5, 5)


def test_image_batch_rejects_out_of_range():
    with pytest.raises(ValueError):
        ImageBatch(torch.full((1, 2, 2, 1), 256.0))


def test_apply_examples():
    x = ImageBatch(torch.tensor([250.0, 100.0]).reshape(1, 1, 2, 1))
    p = Perturbation(torch.tensor([10.0, -10.0]).reshape(1, 2, 1), 10.0, "mid")
    out = apply_perturbation(x, p).data.flatten().tolist()
    assert out == [255.0, 90.0]


def test_apply_zero_is_identity():
    x = ImageBatch(torch.rand(3, 4, 4, 3) * 255)
    out = apply_perturbation(x, Perturbation(torch.zeros(4, 4, 3), 1.0, "mid"))
    assert torch.equal(out.data, x.data)


def test_apply_shape_mismatch_reports_both():
    x = ImageBatch(torch.zeros(1, 4, 4, 3))
    with pytest.raises(ValueError, match=r"\(4, 4, 1\).*\(4, 4, 3\)"):
        apply_perturbation(x, torch.zeros(4, 4, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 300))
def test_apply_respects_range(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = ImageBatch(torch.rand(2, 3, 3, 2, generator=g) * 255)
    delta = (torch.rand(3, 3, 2, generator=g) - 0.5) * 2 * scale
    out = apply_perturbation(x, delta).data
    assert out.min() >= 0 and out.max() <= 255


def test_l2_zero_and_closed_form():
    x = ImageBatch(torch.full((1, 256, 256, 3), 100.0))
    assert perturbation_l2(x, x) == 0.0
    adv = apply_perturbation(x, torch.full((256, 256, 3), 10.0))
    # oracle: direct summation of squared differences
    direct = math.sqrt(sum([10.0 ** 2] * (256 * 256 * 3)))
    assert direct == pytest.approx(10 * math.sqrt(196608))
    assert perturbation_l2(x, adv) == pytest.approx(direct, rel=1e-12)
    assert perturbation_l2(x, adv) == pytest.approx(4434.05, abs=0.01)


def test_l2_is_mean_over_batch():
    x = ImageBatch(torch.full((2, 1, 1, 1), 100.0))
    adv = ImageBatch(torch.tensor([103.0, 104.0]).reshape(2, 1, 1, 1))
    assert perturbation_l2(x, adv) == pytest.approx(3.5)


def test_l2_shape_mismatch():
    with pytest.raises(ValueError):
        perturbation_l2(ImageBatch(torch.zeros(1, 2, 2, 1)), ImageBatch(torch.zeros(2, 2, 2, 1)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_l2_linear_without_clipping(seed, s):
    g = torch.Generator().manual_seed(seed)
    x = ImageBatch(50 + torch.rand(3, 4, 4, 3, generator=g, dtype=torch.float64) * 150)
    delta = (torch.rand(4, 4, 3, generator=g, dtype=torch.float64) - 0.5) * 40
    full = perturbation_l2(x, apply_perturbation(x, delta))
    part = perturbation_l2(x, apply_perturbation(x, s * delta))
    assert part == pytest.approx(s * full, rel=1e-9, abs=1e-9)
    assert full >= 0


def test_perturbation_budget_enforced_for_mid():
    with pytest.raises(ValueError):
        Perturbation(torch.full((2, 2, 1), 11.0), 10.0, "mid")
    Perturbation(torch.full((2, 2, 1), 11.0), 10.0, "raw")


def test_uapf_roundtrip_bit_identical(tmp_path):
    delta = (torch.rand(5, 7, 3) - 0.5) * 20
    p = Perturbation(project_to_ball(delta, 10.0), 10.0, "mid", "cnn")
    path = write_uapf(tmp_path / "p.uapf", p, created_unix=123)
    q, rng = read_uapf(path)
    assert torch.equal(q.delta, p.delta)
    assert (q.epsilon, q.stage, q.source_model_id) == (10.0, "mid", "cnn")
    assert rng == PixelRange()
    header, _ = read_uapf_raw(path)
    assert set(header) >= {"shape", "epsilon", "pixel_lo", "pixel_hi", "stage", "source_model_id",
                           "created_unix"}
    assert header["shape"] == [5, 7, 3]


def test_uapf_layout(tmp_path):
    p = Perturbation(torch.arange(6, dtype=torch.float32).reshape(1, 2, 3), 10.0, "mid")
    raw = write_uapf(tmp_path / "p.uapf", p, created_unix=0).read_bytes()
    assert raw[:4] == b"UAPF" and raw[4] == 1
    (hlen,) = struct.unpack("<I", raw[5:9])
    payload = raw[9 + hlen:]
    assert np.frombuffer(payload, "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_uapf_rejects_bad_magic_and_version(tmp_path):
    p = Perturbation(torch.zeros(1, 1, 1), 1.0, "mid")
    raw = bytearray(write_uapf(tmp_path / "p.uapf", p).read_bytes())
    bad = tmp_path / "bad.uapf"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_uapf(bad)
    raw[4] = 2
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_uapf(bad)


def test_uapf_created_unix_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "42")
    p = Perturbation(torch.zeros(1, 1, 1), 1.0, "mid")
    header, _ = read_uapf_raw(write_uapf(tmp_path / "p.uapf", p))
    assert header["created_unix"] == 42
