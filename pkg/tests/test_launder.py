import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nnlaunder.launder import (ActivationProfile, LaunderConfig, LayerProfile, ResetReport, apply_resets,
                               profile_activations, select_resets)
from nnlaunder.nn import BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU, Softmax

from conftest import tiny_cnn


def interpret_listing(layers, DT, CT, strict=False):
    """Line-by-line reading of the per-layer selection loop.

    ``layers`` is a list of (kind, watermark activations, clean activations),
    each activation a per-item list of per-unit values.
    """
    resets = {}
    for j, (kind, wm_acts, clean_acts) in enumerate(layers):
        width = len(wm_acts[0])
        aw_total = [0.0] * width
        for item in wm_acts:
            for v in range(width):
                aw_total[v] = aw_total[v] + item[v]
        an_total = [0.0] * width
        for item in clean_acts:
            for v in range(width):
                an_total[v] = an_total[v] + item[v]
        K, I = len(wm_acts), len(clean_acts)
        aw_avg = [t / K for t in aw_total]
        an_avg = [t / I for t in an_total]
        a_diff = [aw_avg[v] - an_avg[v] for v in range(width)]
        chosen = []
        for v in range(width):
            stat = an_avg[v] if strict else a_diff[v]
            if kind == "Dense":
                if stat > DT:
                    chosen.append(v)
            else:
                if stat > CT:
                    chosen.append(v)
        resets[j] = chosen
    return resets


def _profile_from(layers):
    return ActivationProfile([
        LayerProfile(j, kind, np.sum(np.array(w, dtype=np.float64), axis=0), np.sum(np.array(c, dtype=np.float64), axis=0),
                     len(w), len(c))
        for j, (kind, w, c) in enumerate(layers)
    ])


def test_hand_trace_example():
    layers = [("Dense", [[5.0, 0.1]], [[0.2, 0.1]])]
    cfg = LaunderConfig(threshold_mode="absolute", DT=1.0, CT=1.0)
    assert select_resets(_profile_from(layers), cfg).units == {0: [0]}
    assert interpret_listing(layers, 1.0, 1.0) == {0: [0]}


# quarter-integer activations keep every sum and mean exact in binary floating point
quarters = st.integers(-8, 40).map(lambda v: v / 4)


@st.composite
def tiny_profiles(draw):
    layers = []
    for _ in range(draw(st.integers(1, 3))):
        kind = draw(st.sampled_from(["Dense", "Conv2D"]))
        width = draw(st.integers(1, 5))
        K = draw(st.sampled_from([1, 2, 4]))
        I = draw(st.sampled_from([1, 2, 4, 8]))
        w = [[draw(quarters) for _ in range(width)] for _ in range(K)]
        c = [[draw(quarters) for _ in range(width)] for _ in range(I)]
        layers.append((kind, w, c))
    return layers


def test_random_profiles_match_interpreter():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        layers = []
        for _ in range(rng.integers(1, 4)):
            kind = ["Dense", "Conv2D"][rng.integers(0, 2)]
            width = int(rng.integers(1, 6))
            K, I = int(rng.choice([1, 2, 4])), int(rng.choice([1, 2, 4, 8]))
            layers.append((kind, (rng.integers(-8, 40, (K, width)) / 4).tolist(),
                           (rng.integers(-8, 40, (I, width)) / 4).tolist()))
        DT, CT = rng.integers(-4, 20, 2) / 4
        for strict in (False, True):
            cfg = LaunderConfig(threshold_mode="absolute", DT=float(DT), CT=float(CT), strict_listing=strict)
            assert select_resets(_profile_from(layers), cfg).units == interpret_listing(layers, DT, CT, strict)


@given(tiny_profiles(), quarters, quarters, st.booleans())
def test_interpreter_equivalence_property(layers, DT, CT, strict):
    cfg = LaunderConfig(threshold_mode="absolute", DT=DT, CT=CT, strict_listing=strict)
    assert select_resets(_profile_from(layers), cfg).units == interpret_listing(layers, DT, CT, strict)


@given(tiny_profiles(), quarters, st.integers(1, 8))
def test_raising_threshold_never_adds(layers, DT, bump):
    profile = _profile_from(layers)
    low = select_resets(profile, LaunderConfig(threshold_mode="absolute", DT=DT, CT=DT))
    high = select_resets(profile, LaunderConfig(threshold_mode="absolute", DT=DT + bump / 4, CT=DT + bump / 4))
    for j in low.units:
        assert set(high.units[j]) <= set(low.units[j])


def test_threshold_edges():
    negative = [("Dense", [[0.0, -1.0]], [[1.0, 0.0]])]
    assert select_resets(_profile_from(negative), LaunderConfig(threshold_mode="absolute")).total == 0
    tiny = [("Dense", [[0.25, 0.0]], [[0.0, 0.0]])]
    assert select_resets(_profile_from(tiny), LaunderConfig(threshold_mode="absolute", DT=0.0)).units == {0: [0]}
    with pytest.raises(ValueError):
        LaunderConfig(DT=-np.inf)
    with pytest.raises(ValueError):
        LaunderConfig(threshold_mode="sigma", k=0)
    with pytest.raises(ValueError):
        LaunderConfig(reset_mode="random")


def test_sigma_mode_threshold():
    layers = [("Dense", [[10.0] + [0.0] * 9], [[0.0] * 10])]
    r = select_resets(_profile_from(layers), LaunderConfig(threshold_mode="sigma", k=2))
    diff = np.array([10.0] + [0.0] * 9)
    assert r.thresholds[0] == pytest.approx(diff.mean() + 2 * diff.std())
    assert r.units == {0: [0]}


def test_report_json_round_trip():
    r = ResetReport({0: [1, 3], 4: []}, {0: 0.5, 4: 1.0}, "absolute")
    d = json.loads(r.to_json())
    assert d["total"] == 2 and d["layers"]["0"]["units"] == [1, 3]
    back = ResetReport.from_dict(d)
    assert back.units == r.units and back.thresholds == r.thresholds


# -- profiling ---------------------------------------------------------------------


def test_profile_hand_computation():
    m = Model([Dense(2), ReLU(), Dense(2), Softmax()], (2,))
    m.layers[0].params["W"][:] = [[1.0, -1.0], [2.0, 0.5]]
    m.layers[0].params["b"][:] = [0.0, 0.5]
    W = np.array([[1.0, 1.0], [2.0, 0.0]], np.float32)
    X = np.array([[0.0, 1.0], [1.0, -1.0]], np.float32)
    # hidden pre-activations: W rows -> [3, 0], [2, -1.5]; X rows -> [2, 1], [-1, -1]
    p = profile_activations(m, X, W)
    first = p[0]
    np.testing.assert_allclose(first.aw_avg, [2.5, 0.0])
    np.testing.assert_allclose(first.an_avg, [1.0, 0.5])
    np.testing.assert_array_equal(first.diff, first.aw_avg - first.an_avg)
    assert first.K == 2 and first.I == 2


def test_profile_identities():
    m = tiny_cnn(seed=1)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(6, 8, 8, 1)).astype(np.float32)
    W = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    same = profile_activations(m, X, X)
    assert all((lp.diff == 0).all() for lp in same.layers)
    p = profile_activations(m, X, W)
    doubled = profile_activations(m, X, np.concatenate([W, W]))
    for a, b in zip(p.layers, doubled.layers):
        np.testing.assert_allclose(a.aw_avg, b.aw_avg, rtol=1e-12)
    widths = [lp.diff.shape[0] for lp in p.layers]
    assert widths == [4, 8, 4]
    with pytest.raises(ValueError):
        profile_activations(m, X, np.zeros((2, 9, 9, 1), np.float32))


@given(st.permutations(range(6)), st.permutations(range(4)))
def test_profile_permutation_invariant(px, pw):
    m = tiny_cnn(seed=3)
    rng = np.random.default_rng(7)
    X = rng.uniform(size=(6, 8, 8, 1)).astype(np.float32)
    W = rng.uniform(size=(4, 8, 8, 1)).astype(np.float32)
    a = profile_activations(m, X, W)
    b = profile_activations(m, X[list(px)], W[list(pw)])
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_allclose(la.diff, lb.diff, rtol=1e-9, atol=1e-12)


# -- resets ------------------------------------------------------------------------


def test_dense_reset_kills_unit():
    m = tiny_cnn(seed=0)
    dense = m.parametric_indices()[1]
    out = apply_resets(m, ResetReport({dense: [2, 5]}, {dense: 0.0}), LaunderConfig())
    x = np.random.default_rng(1).uniform(size=(20, 8, 8, 1)).astype(np.float32) * 5
    _, acts = out.forward_with_activations(x)
    assert (acts[dense + 1][:, [2, 5]] == 0).all()
    # input model untouched
    assert m.layers[dense].params["W"][:, 2].any()
    profile = profile_activations(out, x, x[::-1] * 0.3)
    assert (profile[dense].aw_avg[[2, 5]] == 0).all() and (profile[dense].an_avg[[2, 5]] == 0).all()


def test_conv_reset_zeroes_feature_map():
    m = tiny_cnn(seed=2)
    out = apply_resets(m, ResetReport({0: [1]}, {0: 0.0}), LaunderConfig())
    x = np.random.default_rng(3).normal(size=(5, 8, 8, 1)).astype(np.float32)
    assert (out.layers[0].forward(x)[..., 1] == 0).all()
    assert out.layers[0].frozen == {1: 0.0}


def test_empty_report_is_identity():
    m = tiny_cnn(seed=2)
    out = apply_resets(m, ResetReport({0: [], 4: []}, {0: 0.0, 4: 0.0}), LaunderConfig())
    for (_, _, a), (_, _, b) in zip(m.state(), out.state()):
        assert np.array_equal(a, b)


def test_layer_median_mode():
    m = tiny_cnn(seed=4)
    w = m.layers[0].params["W"]
    expected = float(np.median(w[..., [0, 2, 3]]))
    out = apply_resets(m, ResetReport({0: [1]}, {0: 0.0}), LaunderConfig(reset_mode="layer-median"))
    assert (out.layers[0].params["W"][..., 1] == np.float32(expected)).all()
    assert out.layers[0].params["b"][1] == np.float32(expected)


def test_reset_errors():
    m = tiny_cnn()
    with pytest.raises(IndexError):
        apply_resets(m, ResetReport({0: [4]}, {0: 0.0}), LaunderConfig())
    with pytest.raises(IndexError):
        apply_resets(m, ResetReport({1: [0]}, {1: 0.0}), LaunderConfig())


def test_batchnorm_reset():
    m = Model([Conv2D(3, 3), BatchNorm(), ReLU(), Flatten(), Dense(2)], (5, 5, 1), seed=0)
    bn = m.layers[1]
    bn.params["gamma"][:] = 2.0
    bn.params["beta"][:] = 0.7
    bn.buffers["running_mean"][:] = 0.3
    out = apply_resets(m, ResetReport({0: [2]}, {0: 0.0}), LaunderConfig(reset_batchnorm=True))
    nbn = out.layers[1]
    assert nbn.params["gamma"][2] == 1 and nbn.params["beta"][2] == 0
    assert nbn.buffers["running_mean"][2] == 0 and nbn.buffers["running_var"][2] == 1
    assert nbn.params["gamma"][0] == 2
    x = np.random.default_rng(0).uniform(size=(4, 5, 5, 1)).astype(np.float32)
    _, acts = out.forward_with_activations(x)
    assert (acts[2][..., 2] == 0).all()


def test_layer_range_selection():
    m = Model([Conv2D(2, 3), ReLU(), MaxPool2D(2), Conv2D(2, 3), ReLU(), Flatten(), Dense(4), ReLU(), Dense(3),
               Softmax()], (12, 12, 1))
    params = m.parametric_indices()
    assert LaunderConfig().eligible(m) == params[:-1]
    assert LaunderConfig(layer_range="second-half").eligible(m) == params[1:3]
    assert LaunderConfig(layer_range=(0, 0)).eligible(m) == params[:1]
    assert LaunderConfig(layer_range=(0, 3)).eligible(m) == params
    with pytest.raises(ValueError):
        LaunderConfig(layer_range=(0, 4)).eligible(m)
    with pytest.raises(ValueError):
        LaunderConfig(layer_range=(2, 1))
