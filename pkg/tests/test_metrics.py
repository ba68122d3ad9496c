import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from sonomesh.errors import NumericError, ShapeError
from sonomesh.metrics import EvalReport, evaluate, mpjpe, pa_mpjpe, pve, similarity_align

seeds = st.integers(0, 2 ** 31 - 1)


def loop_mean_distance(a, b):
    total = 0.0
    for p, q in zip(a, b):
        total += sum((x - y) ** 2 for x, y in zip(p, q)) ** 0.5
    return 100 * total / len(a)


def random_similarity(rng):
    R = Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()
    return R, rng.normal(size=3), rng.uniform(0.2, 5.0)


def test_identity_is_zero():
    g = np.random.default_rng(0).normal(size=(16, 3))
    assert mpjpe(g, g) == 0.0 and pve(g, g) == 0.0
    assert pa_mpjpe(g, g) == pytest.approx(0.0, abs=1e-9)


def test_uniform_offset():
    g = np.random.default_rng(1).normal(size=(16, 3))
    d = np.array([0.03, -0.04, 0.0])  # |d| = 5 cm
    assert mpjpe(g + d, g) == pytest.approx(5.0, abs=1e-12)
    assert pve(g + d, g) == pytest.approx(5.0, abs=1e-12)


def test_single_vertex_moved():
    v = np.random.default_rng(2).normal(size=(150, 3))
    moved = v.copy()
    moved[17] += [0.0, 0.3, 0.0]
    assert pve(moved, v) == pytest.approx(30.0 / 150, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 40))
def test_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert mpjpe(a, b) == pytest.approx(loop_mean_distance(a, b), rel=1e-12)
    assert pve(a, b) == pytest.approx(loop_mean_distance(a, b), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mpjpe(np.zeros((16, 3)), np.zeros((15, 3)))
    with pytest.raises(ShapeError):
        pve(np.zeros(3), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_nonnegative_and_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    t = rng.normal(size=3) * 10
    assert mpjpe(a, b) > 0
    assert mpjpe(a + t, b + t) == pytest.approx(mpjpe(a, b), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_rigid_copy_aligns_to_zero(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(16, 3))
    R, t, _ = random_similarity(rng)
    assert pa_mpjpe(g @ R.T + t, g) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_pa_invariant_to_similarity_of_pred(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    R, t, s = random_similarity(rng)
    assert pa_mpjpe(s * p @ R.T + t, g) == pytest.approx(pa_mpjpe(p, g), abs=1e-9)
    assert pa_mpjpe(p, g) <= mpjpe(p, g) + 1e-9


def test_stretch_closed_form():
    # cross of half-widths a (x) and b (y); pred stretches x by k.  By symmetry
    # the optimal rotation is the identity and the scale is
    # s = (k a^2 + b^2) / (k^2 a^2 + b^2).
    a, b, k = 0.4, 0.25, 1.6
    gt = np.array([[a, 0, 0], [-a, 0, 0], [0, b, 0], [0, -b, 0]])
    pred = gt * [k, 1, 1]
    s = (k * a ** 2 + b ** 2) / (k ** 2 * a ** 2 + b ** 2)
    expected = 100 * (abs(s * k * a - a) + abs(s * b - b)) / 2
    assert pa_mpjpe(pred, gt) == pytest.approx(expected, abs=1e-9)
    np.testing.assert_allclose(similarity_align(pred, gt)[:, :2], gt[:, :2] * [s * k, s], atol=1e-12)


@pytest.mark.parametrize("pts", [
    np.array([[0.0, 0, 0], [1.0, 0, 0]]),
    np.array([[0.0, 0, 0], [1.0, 1, 1], [2.0, 2, 2], [3.0, 3, 3]]),
    np.zeros((5, 3)),
])
def test_degenerate_alignment(pts):
    with pytest.raises(NumericError):
        pa_mpjpe(pts, pts + 1)


def test_reflection_is_not_used():
    g = np.random.default_rng(3).normal(size=(16, 3))
    mirrored = g * [-1, 1, 1]
    assert pa_mpjpe(mirrored, g) > 1.0


def test_evaluate_and_report_exports():
    rng = np.random.default_rng(4)
    samples = []
    for i in range(3):
        g, v = rng.normal(size=(16, 3)), rng.normal(size=(150, 3))
        samples.append((f"s{i}", g + 0.01 * rng.normal(size=g.shape), g, v + 0.02, v))
    rep = evaluate(samples, label="unit")
    assert rep.n_samples == 3
    assert rep.mpjpe_cm == pytest.approx(np.mean([mpjpe(s[1], s[2]) for s in samples]))
    assert rep.pve_cm == pytest.approx(np.mean([pve(s[3], s[4]) for s in samples]))
    d = json.loads(rep.to_json())
    assert d["schema_version"] == 1 and d["label"] == "unit" and len(d["per_joint_cm"]) == 16
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["sample_id", "mpjpe_cm", "pve_cm", "pa_mpjpe_cm"]
    assert [r[0] for r in rows[1:]] == ["s0", "s1", "s2"]


def test_evaluate_without_vertices_and_empty():
    g = np.random.default_rng(5).normal(size=(16, 3))
    rep = evaluate([("a", g, g, None, None)])
    assert np.isnan(rep.pve_cm) and rep.mpjpe_cm == 0.0
    with pytest.raises(ShapeError):
        evaluate([])
    with pytest.raises(ShapeError):
        EvalReport(-1.0, 0.0, 0.0)
