import json

import numpy as np
import pytest
from scipy import integrate, stats

from advbn.analysis import (
    ChannelAccumulator,
    GaussianFit,
    available_layers,
    channel_gaussian_fit,
    divergence_report,
    gaussian_kl,
    symmetric_kl,
    symmetric_kl_channels,
)
from advbn.data import generate_dataset, shift_dataset
from advbn.models import build_mini_resnet, split


def quad_kl(ma, sa, mb, sb):
    """KL(A||B) by numerical integration of p log(p/q)."""
    p, q = stats.norm(ma, sa), stats.norm(mb, sb)
    lo, hi = min(ma - 12 * sa, mb - 12 * sb), max(ma + 12 * sa, mb + 12 * sb)
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi, limit=200)
    return val


def fit(mean, std):
    return GaussianFit(np.atleast_1d(np.asarray(mean, float)), np.atleast_1d(np.asarray(std, float)))


def test_unit_mean_shift_is_exactly_one():
    assert symmetric_kl(fit(0.0, 1.0), fit(1.0, 1.0)) == 1.0


def test_identical_fits_zero():
    a = fit([0.3, -2.0], [0.5, 4.0])
    assert symmetric_kl(a, a) == 0.0


def test_symmetric():
    a, b = fit([0.1, 2.0], [1.0, 0.3]), fit([-1.0, 2.5], [2.0, 0.7])
    assert symmetric_kl(a, b) == pytest.approx(symmetric_kl(b, a), rel=1e-15)


def test_closed_form_case():
    # KL(N(0,1)||N(0,2)) = ln 2 + 1/8 - 1/2;  KL(N(0,2)||N(0,1)) = -ln 2 + 2 - 1/2
    want = (np.log(2) + 1 / 8 - 0.5) + (-np.log(2) + 2 - 0.5)
    assert symmetric_kl(fit(0, 1), fit(0, 2)) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("ma,sa,mb,sb", [(0, 1, 0.5, 1.5), (2, 0.3, 1.7, 0.4), (-1, 2, 3, 1), (0.1, 0.05, 0.12, 0.06)])
def test_kl_matches_quadrature(ma, sa, mb, sb):
    assert gaussian_kl(ma, sa, mb, sb) == pytest.approx(quad_kl(ma, sa, mb, sb), abs=1e-4)
    sym = symmetric_kl(fit(ma, sa), fit(mb, sb))
    assert sym == pytest.approx(quad_kl(ma, sa, mb, sb) + quad_kl(mb, sb, ma, sa), abs=1e-4)


def test_channel_average():
    a, b = fit([0, 0], [1, 1]), fit([1, 2], [1, 1])
    np.testing.assert_allclose(symmetric_kl_channels(a, b), [1.0, 4.0])
    assert symmetric_kl(a, b) == 2.5


def test_nonpositive_std_rejected():
    with pytest.raises(ValueError):
        gaussian_kl(0, 0, 0, 1)


def test_accumulator_matches_two_pass(rng):
    x = rng.normal(3.0, 2.0, (37, 4, 5, 5))
    acc = ChannelAccumulator()
    for chunk in np.array_split(x, 6):
        acc.update(chunk)
    g = acc.fit()
    np.testing.assert_allclose(g.mean, x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(g.std, x.std(axis=(0, 2, 3)), rtol=1e-12)


def test_merge_is_order_free(rng):
    x = rng.normal(size=(20, 3, 4, 4))
    a = ChannelAccumulator().update(x[:7])
    b = ChannelAccumulator().update(x[7:])
    ab, ba = a.merge(b), b.merge(a)
    np.testing.assert_allclose(ab.fit().std, ba.fit().std, rtol=1e-13)
    assert a.count == 7 * 16  # merge without inplace leaves operands alone


def test_fit_needs_data():
    with pytest.raises(ValueError):
        channel_gaussian_fit([])
    with pytest.raises(ValueError):
        ChannelAccumulator().update(np.zeros(3))


@pytest.fixture(scope="module")
def setup():
    _, test = generate_dataset(0, 4, 4, 40, 16)
    net = build_mini_resnet(classes=4, width=4)
    return split(net, "stage2_end"), test, shift_dataset(test, "style_affine", 3)


def test_report_defaults_to_suffix_layers(setup):
    sm, test, shifted = setup
    rep = divergence_report(sm, test, shifted)
    assert rep.layers == available_layers(sm)
    assert all(n.startswith(("stage3", "stage4")) for n in rep.layers)
    assert all(v > 0 for v in rep.divergence.values())
    assert divergence_report(sm, test, test).divergence == {n: 0.0 for n in rep.layers}


def test_report_unknown_layer(setup):
    sm, test, shifted = setup
    with pytest.raises(KeyError):
        divergence_report(sm, test, shifted, layers=["nope"])


def test_report_batch_size_invariant(setup):
    sm, test, shifted = setup
    a = divergence_report(sm, test, shifted, batch_size=7).divergence
    b = divergence_report(sm, test, shifted, batch_size=256).divergence
    for n in a:
        assert a[n] == pytest.approx(b[n], rel=1e-9)


def test_report_outputs(setup):
    sm, test, shifted = setup
    rep = divergence_report(sm, test, shifted, layers=["stage3.0.bn1"])
    d = json.loads(rep.to_json())
    assert d["dataset_a"] == test.name and d["layers"] == ["stage3.0.bn1"] and len(d["per_channel"]["stage3.0.bn1"]) == 8
    lines = rep.to_csv("m").splitlines()
    assert lines[0] == "model,layer,dataset_a,dataset_b,divergence"
    assert lines[1].startswith(f"m,stage3.0.bn1,{test.name},{shifted.name},")
    assert float(lines[1].split(",")[-1]) == rep.divergence["stage3.0.bn1"]
    assert "stage3.0.bn1" in rep.to_text()
