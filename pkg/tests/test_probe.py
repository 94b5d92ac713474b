import math
import re

import numpy as np
import pytest

from mvlstm.cells import init_params, zero_params
from mvlstm.data import make_static_sequence
from mvlstm.probe import (ProbeError, ProbeTrace, convergence_report, diverging_color, export_figure,
                          heatmap_svg, pair_divergence, trace_csv, trace_features)
from test_cells import tie_static_path


def test_constant_trace_converges_at_step_two():
    r = convergence_report(np.ones((30, 4)))
    assert r.convergence_time == 2
    np.testing.assert_array_equal(r.converged_value, np.ones(4))


def test_oscillating_trace_never_converges():
    rows = np.array([[(-1.0) ** t, 0.0] for t in range(30)])
    r = convergence_report(rows)
    assert r.convergence_time is None and not r.converged


def test_geometric_decay_convergence_time():
    # step differences are 0.5^t / 2 for t >= 1 (1-based rows at 0.5^(t-1))
    rows = np.array([[0.5 ** t] for t in range(30)])
    r = convergence_report(rows, epsilon=1e-4)
    diffs = [0.5 ** (t - 1) - 0.5 ** t for t in range(1, 30)]
    first = next(i for i, d in enumerate(diffs) if d < 1e-4) + 2
    assert r.convergence_time == first == 15


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        convergence_report(np.ones((3, 2)), epsilon=0)


def test_pair_divergence_hand_value():
    a = convergence_report(np.tile([1.0, 0.0], (5, 1)))
    b = convergence_report(np.tile([0.0, 1.0], (5, 1)))
    assert pair_divergence(a, b) == pytest.approx(math.sqrt(2), abs=1e-15)
    assert pair_divergence(a, a) == 0.0


def test_pair_divergence_is_a_metric():
    rng = np.random.default_rng(0)
    reps = [convergence_report(np.tile(rng.normal(size=3), (4, 1))) for _ in range(5)]
    for x in reps:
        for y in reps:
            assert pair_divergence(x, y) == pair_divergence(y, x)
            for z in reps:
                assert pair_divergence(x, z) <= pair_divergence(x, y) + pair_divergence(y, z) + 1e-15


def test_pair_divergence_rejects_unconverged():
    ok = convergence_report(np.ones((5, 2)))
    bad = convergence_report(np.array([[(-1.0) ** t, 0.0] for t in range(5)]))
    with pytest.raises(ProbeError, match="did not converge"):
        pair_divergence(ok, bad)


def test_trace_prefix_consistency():
    p = init_params(3, 5, "modevar_crosscell", seed=1)
    x = np.array([0.2, -0.1, 0.4])
    long = trace_features(p, make_static_sequence(x[None, :], 0, 30))
    short = trace_features(p, make_static_sequence(x[None, :], 0, 10))
    np.testing.assert_array_equal(long.features[:10], short.features)


def test_trace_rejects_non_static_input():
    p = init_params(2, 3, "lstm", seed=0)
    seq = np.zeros((5, 2))
    seq[3, 1] = 1.0
    with pytest.raises(ProbeError, match="not static"):
        trace_features(p, seq)


def test_tied_static_path_features_equal_dynamics():
    p = tie_static_path(init_params(3, 4, "modevar", seed=2))
    seq = make_static_sequence(np.array([[0.3, 0.1, -0.5]]), 0, 30)
    tr = trace_features(p, seq, record_hat=True)
    np.testing.assert_array_equal(tr.features, tr.hat_features)


def test_hat_features_unavailable_for_plain_lstm():
    with pytest.raises(ProbeError):
        trace_features(init_params(2, 3, "lstm", seed=0), np.zeros((4, 2)), record_hat=True)


def test_zero_params_trace_is_zero_and_midscale():
    tr = trace_features(zero_params(2, 16, "lstm"), np.ones((30, 2)))
    np.testing.assert_array_equal(tr.features, 0)
    svg = heatmap_svg([("zero", tr.features[:, :15].T)])
    cells = re.findall(r'<rect x="\d+" y="\d+" width="14" height="14" fill="(#[0-9a-f]{6})"/>', svg)
    assert len(cells) == 15 * 30
    assert set(cells) == {"#f7f7f7"}


def test_diverging_color_scale():
    assert diverging_color(0.0) == "#f7f7f7"
    assert diverging_color(1.0) == "#b2182b"
    assert diverging_color(-1.0) == "#2166ac"
    assert diverging_color(5.0) == diverging_color(1.0)


def test_trace_csv_exact():
    feats = np.array([[0.5, -0.25], [0.125, 1.0], [0.1, 0.0]])
    text = trace_csv(ProbeTrace(feats, "lstm"), first_k=2)
    assert text == "dim,1,2,3\n0,0.5,0.125,0.1\n1,-0.25,1.0,0.0\n"
    with pytest.raises(ValueError):
        trace_csv(feats, first_k=3)


def test_export_figure_layout(tmp_path):
    p = init_params(4, 32, "lstm", seed=0)
    tr = trace_features(p, np.tile([0.1, 0.2, 0.3, 0.4], (30, 1)))
    paths = export_figure(tr, 15, tmp_path / "probe")
    assert [str(x) for x in paths] == [str(tmp_path / "probe.csv"), str(tmp_path / "probe.svg")]
    rows = (tmp_path / "probe.csv").read_text().splitlines()
    assert len(rows) == 1 + 15
    assert all(len(r.split(",")) == 1 + 30 for r in rows)
    svg = (tmp_path / "probe.svg").read_text()
    assert svg.startswith("<svg") and "time step" in svg and "feature dimension" in svg


def test_export_is_deterministic(tmp_path):
    p = init_params(4, 16, "modevar_crosscell", seed=5)
    seq = np.tile([0.1, -0.2, 0.3, 0.0], (30, 1))
    trs = [trace_features(p, seq), trace_features(p, seq * 2)]
    export_figure(trs, 15, tmp_path / "a", labels=["one", "two"])
    export_figure(trs, 15, tmp_path / "b", labels=["one", "two"])
    for suffix in ("_0.csv", "_1.csv", ".svg"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
