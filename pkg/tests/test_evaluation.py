import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyadapt.errors import ContractViolation
from polyadapt.evaluation.metrics import (frechet_distance, frechet_from_stats, pca_project,
                                          retrieval_accuracy, silhouette, sim_score)
from polyadapt.evaluation.report import (EvalReport, LangRow, diff_reports, read_report,
                                         write_projection, write_report)
from polyadapt.config import Plan
from polyadapt.evaluation.pipeline import row_key
from polyadapt.numerics import Rng


def test_sim_score_range_and_scale_invariance():
    a = Rng(0).normal((5, 8))
    assert np.allclose(sim_score(a, a), 100.0)
    assert np.allclose(sim_score(a, -3 * a), -100.0)
    assert np.allclose(sim_score(a, 2 * a), sim_score(a, a))


def test_frechet_closed_forms():
    d = 4
    eye = np.eye(d)
    # identical Gaussians are at distance 0
    assert frechet_from_stats(np.zeros(d), eye, np.zeros(d), eye) == pytest.approx(0.0, abs=1e-12)
    # mean shift only: squared distance of the means
    mu = np.arange(d, dtype=float)
    assert frechet_from_stats(np.zeros(d), eye, mu, eye) == pytest.approx(mu @ mu)
    # isotropic scales a^2 I and b^2 I: d (a - b)^2
    assert frechet_from_stats(np.zeros(d), 4 * eye, np.zeros(d), 9 * eye) == pytest.approx(d * 1.0)
    # commuting diagonals: sum (sqrt(s1) - sqrt(s2))^2
    s1, s2 = np.array([1.0, 4, 9, 16]), np.array([4.0, 1, 1, 25])
    want = np.sum((np.sqrt(s1) - np.sqrt(s2)) ** 2)
    assert frechet_from_stats(np.zeros(d), np.diag(s1), np.zeros(d), np.diag(s2)) == pytest.approx(want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_is_symmetric_and_nonnegative(seed):
    rng = Rng(seed)
    a = rng.normal((20, 3))
    b = rng.normal((25, 3)) * 2 + 1
    fab, fba = frechet_distance(a, b), frechet_distance(b, a)
    assert fab >= 0
    assert fab == pytest.approx(fba, rel=1e-8, abs=1e-10)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)


def test_frechet_needs_two_samples_and_matching_dims():
    with pytest.raises(ContractViolation):
        frechet_distance(np.ones((1, 3)), np.ones((4, 3)))
    with pytest.raises(ContractViolation):
        frechet_from_stats(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))


def test_frechet_rank_deficient_is_finite():
    # fewer samples than dimensions leaves singular covariances
    a = Rng(0).normal((3, 10))
    b = Rng(1).normal((3, 10))
    assert np.isfinite(frechet_distance(a, b))


def test_retrieval_accuracy():
    e = np.eye(4)
    assert retrieval_accuracy(e, e) == 1.0
    assert retrieval_accuracy(e, e[[1, 0, 2, 3]]) == 0.5
    # identical rows tie; argmax picks the lowest id, which shares the content
    dup = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    assert retrieval_accuracy(dup, dup) == pytest.approx(2 / 3)
    assert retrieval_accuracy(dup, dup, ["a", "a", "b"]) == 1.0
    with pytest.raises(ContractViolation):
        retrieval_accuracy(e, e[:3])


def test_silhouette_oracles():
    # two tight orthogonal groups: a = 0, b = 1, so every point scores 1
    pts = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    assert silhouette(pts, [0, 0, 1, 1]) == pytest.approx(1.0)
    # mixed labels: a = 1 and b = 0.5 for every point
    assert silhouette(pts, [0, 1, 0, 1]) == pytest.approx(-0.5)
    # all points identical: both distances zero, score 0
    assert silhouette(np.ones((4, 2)), [0, 0, 1, 1]) == 0.0
    with pytest.raises(ContractViolation):
        silhouette(pts, [0, 0, 0, 0])
    with pytest.raises(ContractViolation):
        silhouette(pts, [0, 0, 0, 1])


def test_silhouette_matches_direct_formula():
    rng = Rng(4)
    pts = rng.normal((12, 3))
    labels = np.array([0, 1, 2] * 4)
    u = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    dist = 1 - u @ u.T
    scores = []
    for i in range(12):
        own = labels == labels[i]
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == g].mean() for g in set(labels) - {labels[i]})
        scores.append((b - a) / max(a, b))
    assert silhouette(pts, labels) == pytest.approx(np.mean(scores))


def test_pca_recovers_dominant_axis():
    rng = Rng(2)
    x = np.zeros((50, 3))
    x[:, 1] = rng.normal(50) * 10
    x[:, 2] = rng.normal(50) * 0.1
    coords, ratios = pca_project(x, 2)
    assert coords.shape == (50, 2)
    assert ratios[0] > 0.99 and ratios[0] >= ratios[1]
    assert np.allclose(np.abs(coords[:, 0]), np.abs(x[:, 1] - x[:, 1].mean()), atol=0.05)
    # sign convention makes the projection stable under negating the data
    c2, _ = pca_project(-x, 2)
    assert np.allclose(c2, -coords)
    with pytest.raises(ContractViolation):
        pca_project(x[:2], 2)


def make_report():
    rows = [LangRow("anchor", 4, 30.0, 1.5, 0.5), LangRow("L1", 4, 20.0, 2.0, 0.25),
            LangRow("L2", 4, 10.0, 3.0, 0.0), LangRow("L9", 4, 5.0, 4.0, 0.0)]
    return EvalReport(rows, ["L1", "L2"], ["L9"], {"variant": "mlp"})


def test_report_aggregates():
    r = make_report()
    assert r.aggregate("anchor")["sim_mean"] == 30.0
    assert r.aggregate("train_mean")["sim_mean"] == 15.0
    assert r.aggregate("holdout_mean")["frechet"] == 4.0
    assert len(r.all_rows()) == 7
    empty = EvalReport(r.rows[:1], [], [])
    assert empty.aggregate("holdout_mean")["sim_mean"] is None


def test_row_ranges_enforced():
    with pytest.raises(ContractViolation):
        LangRow("L1", 1, 101.0, 0.0, 0.0)
    with pytest.raises(ContractViolation):
        LangRow("L1", 1, 0.0, -1.0, 0.0)
    with pytest.raises(ContractViolation):
        LangRow("L1", 1, 0.0, 0.0, 1.5)


def test_report_round_trip_and_csv(tmp_path):
    r = make_report()
    write_report(r, tmp_path)
    back = read_report(tmp_path)
    assert back.to_json() == r.to_json()
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "lang_id,n,sim_mean,frechet,retrieval"
    assert lines[1] == "anchor,4,30.000000,1.500000,0.500000"
    # writing twice gives the same bytes
    first = (tmp_path / "report.json").read_bytes()
    write_report(read_report(tmp_path / "report.json"), tmp_path)
    assert (tmp_path / "report.json").read_bytes() == first


def test_diff_reports():
    a = make_report().to_json()
    b = json.loads(json.dumps(a))
    assert diff_reports(a, b) == []
    b["rows"][1]["sim_mean"] = 21.0
    b["metadata"]["extra"] = 1
    diffs = diff_reports(a, b)
    assert ("/rows/1/sim_mean", 20.0, 21.0) in diffs
    assert ("/metadata/extra", None, 1) in diffs


def test_write_projection(tmp_path):
    p = tmp_path / "proj.csv"
    write_projection(p, np.array([[1.0, 2.0], [3.0, 4.0]]), [7, 7], ["L0", "L1"])
    assert p.read_text().splitlines() == ["point_id,prompt_id,lang_id,x,y",
                                          "0,7,L0,1.000000,2.000000",
                                          "1,7,L1,3.000000,4.000000"]


def test_row_key_tracks_what_a_row_depends_on():
    base = Plan()
    key = row_key(base, "L1")
    assert row_key(base.replace(**{"eval.languages": "all"}), "L1") == key
    for changed in (base.replace(seed=1), base.replace(**{"sampler.guidance": 2.0}),
                    base.replace(**{"adapter.variant": "mlp"}),
                    base.replace(**{"eval.n_scenes": 8})):
        assert row_key(changed, "L1") != key
    assert row_key(base, "L2") != key
