import csv
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcnhr import model as M, nas as N
from tcnhr.errors import ArgumentError
from tcnhr.trainer import Dataset, TrainConfig, evaluate_mae

from oracles import central_diff, dominated_bruteforce, enumerate_params, max_rel_err


def _single_conv(c_in=2, k=3):
    return M.NetworkSpec((M.LayerSpec(M.CONV, c_in, 1, k=k), M.LayerSpec(M.HEAD, 8, 1)), c_in, 8)


def test_zero_strength_is_zero():
    spec = M.build_seed()
    w = M.init_weights(spec, 0)
    val, grads = N.group_lasso_penalty(w, spec, N.RegularizerConfig(N.SIZE, 0.0))
    assert val == 0 and all(not g.any() for g in grads.values())


def test_closed_form_penalty():
    spec = _single_conv()
    w = M.init_weights(spec, 0)
    w[0]["weight"][:] = 0
    w[0]["weight"][0, 0, :2] = [np.sqrt(2), np.sqrt(2)]  # norm 2
    own = spec[0].c_in * spec[0].k + 1
    assert own == 7
    val, _ = N.group_lasso_penalty(w, spec, N.RegularizerConfig(N.SIZE, 0.1), costs={0: own})
    assert val == pytest.approx(1.4)
    # the default cost also counts the slice the consumer spends on the channel
    full = N.channel_cost(spec, 0, N.SIZE)
    assert full == own + 8
    assert N.group_lasso_penalty(w, spec, N.RegularizerConfig(N.SIZE, 0.1))[0] == pytest.approx(0.2 * full)


@pytest.mark.parametrize("kind", [N.SIZE, N.FLOPS])
def test_channel_cost_is_the_counter_delta(kind):
    spec = M.build_seed((4, 6, 5), (12, 7))
    counter = M.count_params if kind == N.SIZE else M.count_macs
    for i in spec.conv_indices():
        smaller = M.with_channels(spec, {i: spec[i].c_out - 1})
        assert N.channel_cost(spec, i, kind) == counter(spec) - counter(smaller)


def test_alive_costs_follow_surviving_widths():
    spec = M.build_seed((4, 6, 5), (12, 7))
    w = M.init_weights(spec, 2)
    convs = spec.conv_indices()
    full = N.alive_costs(spec, w, N.SIZE, 0.0)
    assert full == {i: N.channel_cost(spec, i, N.SIZE) for i in convs}
    _kill(spec, w, convs[1], [0, 1, 2])
    thinned = N.alive_costs(spec, w, N.SIZE, 1e-6)
    live = M.with_channels(spec, {convs[1]: 1})
    assert thinned == {i: N.channel_cost(live, i, N.SIZE) for i in convs}
    # the neighbours of the thinned conv got cheaper
    assert thinned[convs[0]] < full[convs[0]] and thinned[convs[2]] < full[convs[2]]


def _as64(w):
    return [{k: v.astype(np.float64) for k, v in layer.items()} for layer in w]


@pytest.mark.parametrize("seed", range(3))
def test_penalty_gradient_matches_finite_differences(seed):
    spec = M.build_seed((3, 4, 2), (6, 5))
    w = _as64(M.init_weights(spec, seed))
    rng = np.random.default_rng(seed)
    for layer in w:
        if "gamma" in layer:
            layer["gamma"][:] = rng.uniform(0.5, 1.5, layer["gamma"].shape) * rng.choice([-1, 1], layer["gamma"].shape)
            layer["running_var"][:] = rng.uniform(0.5, 2, layer["running_var"].shape)
    cfg = N.RegularizerConfig(N.FLOPS, 1e-4)
    _, grads = N.group_lasso_penalty(w, spec, cfg)
    for key, g in grads.items():
        i, name = key
        num = central_diff(lambda: N.group_lasso_penalty(w, spec, cfg)[0], w[i][name], h=1e-5)
        assert max_rel_err(g, num) < 1e-4, key


def test_penalty_is_homogeneous_in_the_filter():
    spec = M.NetworkSpec(
        (M.LayerSpec(M.CONV, 2, 3, k=3), M.LayerSpec(M.RELU, 3, 3), M.LayerSpec(M.HEAD, 24, 1)), 2, 8
    )
    w = _as64(M.init_weights(spec, 1))
    cfg = N.RegularizerConfig(N.SIZE, 1e-2)
    base = N.group_lasso_penalty(w, spec, cfg)[0]
    w[0]["weight"] *= 3.0
    assert N.group_lasso_penalty(w, spec, cfg)[0] == pytest.approx(3 * base)


def test_batchnorm_scale_folded_into_norm():
    spec = M.build_seed((3, 3, 3), (4, 4))
    w = M.init_weights(spec, 0)
    i = spec.conv_indices()[0]
    before = N.channel_norms(spec, w, i)
    w[i + 1]["gamma"][:] = [2.0, 0.0, -1.0]
    w[i + 1]["running_var"][:] = 4.0 - 1e-5
    np.testing.assert_allclose(N.channel_norms(spec, w, i), before * [1.0, 0.0, 0.5], rtol=1e-5)


def test_group_lasso_object_agrees_with_function():
    spec = M.build_seed((3, 4, 2), (6, 5))
    w = M.init_weights(spec, 3)
    cfg = N.RegularizerConfig(N.SIZE, 1e-3)
    a, ga = N.make_penalty(spec, cfg)(w)
    b, gb = N.group_lasso_penalty(w, spec, cfg)
    assert a == b and ga.keys() == gb.keys()
    assert N.make_penalty(spec, N.RegularizerConfig(N.SIZE, 0.0)).prox_keys == set()


def test_prox_soft_thresholds_gamma():
    spec = M.build_seed((3, 3, 3), (4, 4))
    w = M.init_weights(spec, 0)
    cfg = N.RegularizerConfig(N.SIZE, 1.0)
    pen = N.make_penalty(spec, cfg)
    i = spec.conv_indices()[0]
    raw = np.sqrt((w[i]["weight"].astype(np.float64) ** 2).sum(axis=(1, 2)))
    cost = N.channel_cost(spec, i, N.SIZE)
    denom = np.sqrt(1 + 1e-5)
    shrink = 1e-3 * cost * raw / denom
    w[i + 1]["gamma"][:] = [1.0, -1.0, shrink[2] / 2]
    want = np.array([1 - shrink[0], -1 + shrink[1], 0.0])
    pen.prox(w, lambda key: np.full(3, 1e-3) if key == (i + 1, "gamma") else None)
    np.testing.assert_allclose(w[i + 1]["gamma"], want, rtol=1e-5)


def test_prox_without_batchnorm_scales_filters():
    spec = M.NetworkSpec(
        (M.LayerSpec(M.CONV, 1, 2, k=2), M.LayerSpec(M.RELU, 2, 2), M.LayerSpec(M.HEAD, 8, 1)), 1, 4
    )
    w = M.init_weights(spec, 0)
    w[0]["weight"][:] = [[[3.0, 4.0]], [[0.003, 0.004]]]
    pen = N.make_penalty(spec, N.RegularizerConfig(N.SIZE, 0.1))
    assert pen.prox_keys == {(0, "weight")}
    cost = N.channel_cost(spec, 0, N.SIZE)
    pen.prox(w, lambda key: np.full((2, 1, 2), 0.01))
    np.testing.assert_allclose(w[0]["weight"][0, 0], np.array([3.0, 4.0]) * (5 - 0.001 * cost) / 5, rtol=1e-6)
    assert not w[0]["weight"][1].any()


def test_prune_zero_threshold_is_identity():
    spec = M.build_seed((4, 6, 5), (12, 7))
    w = M.init_weights(spec, 2)
    s2, w2 = N.prune(spec, w, 0.0)
    assert s2 == spec
    assert all(np.array_equal(a[k], b[k]) for a, b in zip(w, w2) for k in a)


def _kill(spec, w, i, channels, consumer=False, beta=0.0):
    for c in channels:
        w[i]["weight"][c] = 0
        w[i]["bias"][c] = 0
        w[i + 1]["beta"][c] = beta
        if consumer:
            j = N.consumer_of(spec, i)
            if spec[j].kind == M.CONV:
                w[j]["weight"][:, c, :] = 0
            else:
                span = N._consumer_span(spec, i)
                w[j]["weight"][:, c * span : (c + 1) * span] = 0


def test_dead_channel_pruned_with_identical_outputs():
    spec = M.build_seed((4, 6, 5), (12, 7))
    w = M.init_weights(spec, 4)
    convs = spec.conv_indices()
    _kill(spec, w, convs[1], [0, 2])
    _kill(spec, w, convs[-1], [3])
    s2, w2 = N.prune(spec, w, 1e-9)
    assert s2.block_out_channels() == [4, 6, 4]
    assert s2[convs[1]].c_out == 2
    x = np.random.default_rng(0).standard_normal((16, 4, 256)).astype(np.float32)
    y1, y2 = M.forward(spec, w, x), M.forward(s2, w2, x)
    # the removed terms are exact zeros; only BLAS summation order differs
    np.testing.assert_allclose(y2, y1, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_pruning_channels_without_downstream_effect(seed):
    rng = np.random.default_rng(seed)
    spec = M.build_seed(tuple(rng.integers(3, 7, 3)), (10, 6))
    w = M.init_weights(spec, seed)
    for i in spec.conv_indices():
        dead = rng.choice(spec[i].c_out, size=rng.integers(0, spec[i].c_out), replace=False)
        _kill(spec, w, i, dead, consumer=True, beta=rng.normal())
    s2, w2 = N.prune(spec, w, 0.01)
    assert M.count_params(s2) == enumerate_params(s2) <= M.count_params(spec)
    x = rng.standard_normal((8, 4, 256)).astype(np.float32)
    y1, y2 = M.forward(spec, w, x), M.forward(s2, w2, x)
    assert np.abs(y1 - y2).max() <= 1e-6 * max(1.0, np.abs(y1).max())


def test_prune_keeps_one_channel_and_ties_survive():
    spec = M.NetworkSpec(
        (M.LayerSpec(M.CONV, 1, 3, k=2), M.LayerSpec(M.RELU, 3, 3), M.LayerSpec(M.HEAD, 24, 1)), 1, 8
    )
    w = M.init_weights(spec, 0)
    w[0]["weight"][:] = [[[0.3, 0.4]], [[0.0, 0.25]], [[0.0, 0.2]]]
    s2, _ = N.prune(spec, w, 0.5)
    assert s2[0].c_out == 1
    s3, w3 = N.prune(spec, w, 0.25)
    assert s3[0].c_out == 2
    np.testing.assert_array_equal(w3[0]["weight"][:, 0, 1], np.float32([0.4, 0.25]))
    with pytest.raises(ArgumentError):
        N.prune(spec, w, -1)


def test_expand():
    seed = M.build_seed()
    assert N.expand(seed, 1.0) == seed
    big = N.expand(seed, 2.0)
    assert big.block_out_channels() == [64, 128, 256]
    assert M.count_params(big) == enumerate_params(big)
    assert N.expand(M.build_seed((1, 3, 5)), 1.5).block_out_channels() == [2, 5, 8]
    with pytest.raises(ArgumentError):
        N.expand(seed, 0.5)


def _tiny_data(n=32, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, 4, 256)), rng.uniform(60, 100, n))


def test_noop_search_returns_seed_and_cardinality(tmp_path):
    seed = M.build_seed((3, 3, 3), (4, 4))
    data, val = _tiny_data(), _tiny_data(8, 1)
    cfg = TrainConfig(max_epochs=1, patience=1, batch_size=16)
    grid = [N.RegularizerConfig(N.SIZE, 0.0, 0.0, 1.0), N.RegularizerConfig(N.FLOPS, 1e-3, 0.5, 2.0)]
    points = N.morph_search(seed, data, val, grid, cfg)
    assert len(points) == len(grid)
    assert points[0].spec == seed
    for p in points:
        assert p.params == M.count_params(p.spec) and p.macs == M.count_macs(p.spec)
        assert evaluate_mae(p.spec, p.weights, val.x, val.y) == p.mae
    N.write_points(points, tmp_path / "pts.csv")
    rows = list(csv.reader(open(tmp_path / "pts.csv")))
    assert rows[0] == N.CSV_FIELDS and len(rows) == 3
    with pytest.raises(ArgumentError):
        N.morph_search(seed, data, val, [], cfg)


def test_regularizer_config_validation():
    with pytest.raises(ArgumentError):
        N.RegularizerConfig("latency")
    with pytest.raises(ArgumentError):
        N.RegularizerConfig(N.SIZE, -1.0)
    with pytest.raises(ArgumentError):
        N.RegularizerConfig(N.SIZE, 1.0, 0.1, 0.9)
    assert len(N.default_grid()) == 18


@dataclass
class P:
    mae: float
    params: int
    macs: int = 0


def test_pareto_fixtures():
    a, b = P(5, 10_000), P(6, 20_000)
    assert N.pareto_front([a, b]) == [a]
    c = P(4, 20_000)
    assert N.pareto_front([a, c]) == [a, c]
    with pytest.raises(ArgumentError):
        N.pareto_front([a], axis="energy")


def test_pareto_matches_bruteforce_1000_points():
    rng = np.random.default_rng(7)
    pts = [P(float(rng.uniform(1, 10)), int(rng.integers(1, 10**6)), int(rng.integers(1, 10**7))) for _ in range(1000)]
    for axis in ("params", "macs"):
        got = N.pareto_front(pts, axis)
        want = dominated_bruteforce(pts, axis)
        assert sorted(map(id, got)) == sorted(map(id, want))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=30))
def test_pareto_with_ties(pairs):
    pts = [P(float(m), s) for m, s in pairs]
    got = N.pareto_front(pts)
    assert sorted(map(id, got)) == sorted(map(id, dominated_bruteforce(pts, "params")))
    assert [p.params for p in got] == sorted(p.params for p in got)
