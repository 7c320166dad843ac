import json
import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reftok.metrics import (ClipMetrics, aggregate, evaluate, format_l1, format_table, gaussian_window,
                            l1_error, lpips_plugin, psnr, ssim)


def test_psnr_closed_form():
    a = np.zeros((1, 8, 8, 3))
    b = np.full((1, 8, 8, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_cap_and_errors(rng):
    a = rng.random((2, 8, 8, 3))
    assert psnr(a, a) == 100.0
    with pytest.raises(ValueError):
        psnr(a, a[:1])


def test_psnr_symmetric_and_monotone(rng):
    a = rng.random((2, 16, 16, 3))
    noise = rng.normal(size=a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    b = rng.random(a.shape)
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity_and_constant(rng):
    a = rng.random((2, 16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    c = np.full((1, 16, 16, 3), 0.5)
    assert ssim(c, c) == pytest.approx(1.0)


def test_ssim_inverted_checkerboard():
    yy, xx = np.mgrid[0:32, 0:32]
    a = ((yy + xx) % 2).astype(float)
    a = np.repeat(a[None, ..., None], 3, axis=-1)
    s = ssim(a, 1.0 - a)
    # means match (0.5), variances match, covariance is -var: ssim = (-v + c2)/(v + c2)
    v = 0.25
    c2 = 0.03 ** 2
    assert s == pytest.approx((-2 * v + c2) / (2 * v + c2), abs=0.02)
    assert s < -0.9


def test_ssim_against_direct_formula(rng):
    a = rng.random((1, 12, 12, 1))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    g = np.outer(gaussian_window(), gaussian_window())
    vals = []
    for y in range(2):
        for x in range(2):
            pa, pb = a[0, y:y + 11, x:x + 11, 0], b[0, y:y + 11, x:x + 11, 0]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va, vb = (g * pa * pa).sum() - ma ** 2, (g * pb * pb).sum() - mb ** 2
            cv = (g * pa * pb).sum() - ma * mb
            c1, c2 = 0.01 ** 2, 0.03 ** 2
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-10)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 10, 10, 3)), np.zeros((1, 10, 10, 3)))


def test_l1(rng):
    a = rng.random((2, 8, 8, 3))
    b = rng.random((2, 8, 8, 3))
    assert l1_error(a, a) == 0.0
    oracle = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert l1_error(a, b) == pytest.approx(oracle, rel=1e-12)
    assert l1_error(a, b) == l1_error(b, a)
    assert format_l1(l1_error(a, a + 0.0106)) == "1.06"
    assert format_l1(0.0106) == "1.06"


def test_aggregate_and_table():
    per = [ClipMetrics("a", 20.0, 0.5, 0.02), ClipMetrics("b", 30.0, 0.7, 0.04)]
    rep = aggregate("m", "128:1", per)
    assert rep.psnr == 25.0 and rep.ssim == pytest.approx(0.6) and rep.l1 == pytest.approx(0.03)
    assert rep.clip_count == 2
    d = json.loads(rep.to_json())
    assert d["psnr"] == 25.0 and len(d["per_clip"]) == 2
    table = format_table([rep])
    assert "PSNR" in table and "SSIM" in table and "25.00" in table
    with pytest.raises(ValueError):
        aggregate("m", "1:1", [])


class _Identity:
    """Stub model that returns the targets unchanged."""
    patch = None

    def reconstruct(self, ref, tgt):
        return tgt


def test_evaluate_identity_stub():
    from reftok.dataio import synth_redundant_clip
    from reftok.patchgrid import PatchSpec
    stub = _Identity()
    stub.patch = PatchSpec(2, 8, 8)
    clips = [synth_redundant_clip(s) for s in range(3)]
    clips = [type(c)(c.frames[:7], c.frame_interval, c.source_id) for c in clips]
    rep = evaluate(stub, clips, 1)
    assert rep.psnr == 100.0 and rep.ssim == pytest.approx(1.0) and rep.l1 == 0.0
    assert rep.compression == "128:1"
    with pytest.raises(ValueError):
        evaluate(stub, [], 1)


def test_lpips_plugin(tmp_path, rng):
    script = tmp_path / "fake_lpips.py"
    script.write_text("import sys\nfrom reftok.dataio import read_rvc\n"
                      "a, b = read_rvc(sys.argv[1]), read_rvc(sys.argv[2])\n"
                      "print(abs(a.astype(float) - b.astype(float)).mean() / 255)\n")
    a = rng.random((2, 8, 8, 3))
    assert lpips_plugin([sys.executable, str(script)], a, a) == 0.0
    assert lpips_plugin([sys.executable, str(script)], a, 1 - a) > 0.1


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.5), st.integers(0, 2**31 - 1))
def test_psnr_formula_property(offset, seed):
    a = np.random.default_rng(seed).random((1, 4, 4, 3)) * 0.4
    assert psnr(a, a + offset) == pytest.approx(10 * math.log10(1 / offset ** 2), abs=1e-6)
