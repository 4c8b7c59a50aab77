import csv

import numpy as np
import pytest

from emcomm.analysis import (
    NOISE,
    ClusterReport,
    MessagePointSet,
    analyze_run,
    dbscan,
    silhouette,
)
from emcomm.envs import EnvConfig
from emcomm.trainer import CACL, NO_COMM, build_agents, evaluate

from oracles import brute_dbscan, brute_silhouette, canonical

SMALL_PP = EnvConfig.predator_prey(grid_size=5, n_agents=2, n_preys=1, max_steps=10)


def _blobs(rng, n=200, dim=4):
    k = int(rng.integers(1, 5))
    centers = rng.random((k, dim))
    which = rng.integers(0, k, n)
    pts = centers[which] + rng.normal(0, rng.uniform(0.02, 0.1), (n, dim))
    noise = rng.random(n) < 0.1
    pts[noise] = rng.random((noise.sum(), dim))
    return pts


def test_dbscan_matches_brute_force():
    rng = np.random.default_rng(41)
    for _ in range(50):
        pts = _blobs(rng)
        labels = dbscan(pts, 0.15, 4)
        assert canonical(labels) == canonical(brute_dbscan(pts, 0.15, 4))


def test_dbscan_identical_points_one_cluster():
    labels = dbscan(np.full((10, 4), 0.3))
    np.testing.assert_array_equal(labels, 0)


def test_dbscan_isolated_points_are_noise():
    labels = dbscan(np.array([[0.0, 0, 0, 0], [1.0, 1, 1, 1]]))
    np.testing.assert_array_equal(labels, NOISE)


def test_dbscan_neighbourhood_includes_self():
    # four points within eps of each other: each core counts itself
    pts = np.array([[0.0, 0, 0, 0], [0.05, 0, 0, 0], [0.1, 0, 0, 0], [0.0, 0.05, 0, 0]])
    np.testing.assert_array_equal(dbscan(pts, 0.15, 4), 0)
    np.testing.assert_array_equal(dbscan(pts, 0.15, 5), NOISE)


def test_dbscan_empty_and_bad_args():
    assert dbscan(np.zeros((0, 4))).shape == (0,)
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 4)), eps=0.0)
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 4)), min_pts=0)


def test_silhouette_matches_brute_force():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 30:
        pts = _blobs(rng, n=80)
        labels = dbscan(pts, 0.15, 4)
        if len(set(labels[labels != NOISE].tolist())) < 2:
            continue
        assert abs(silhouette(pts, labels) - brute_silhouette(pts, labels)) < 1e-9
        checked += 1


def test_silhouette_two_tight_pairs():
    pts = np.array([[0.0, 0, 0, 0], [0.001, 0, 0, 0], [1.0, 1, 1, 1], [1.0, 1, 1, 0.999]])
    assert silhouette(pts, np.array([0, 0, 1, 1])) > 0.99


def test_silhouette_single_distribution_near_zero():
    rng = np.random.default_rng(43)
    pts = rng.random((1000, 4))
    labels = rng.integers(0, 2, 1000)
    assert abs(silhouette(pts, labels)) < 0.2


def test_silhouette_needs_two_clusters_and_is_bounded():
    assert silhouette(np.zeros((5, 4)), np.zeros(5, int)) is None
    assert silhouette(np.zeros((5, 4)), np.full(5, NOISE)) is None
    rng = np.random.default_rng(44)
    for _ in range(20):
        pts = rng.random((30, 4))
        s = silhouette(pts, rng.integers(-1, 3, 30))
        assert s is None or -1.0 <= s <= 1.0


def test_report_with_zero_message_head():
    agents = build_agents(SMALL_PP, CACL, 0)
    for a in agents:
        a.message_head.l3.weight.data[:] = 0.0
        a.message_head.l3.bias.data[:] = 0.0
    report, points = analyze_run(agents, SMALL_PP, episodes=3)
    assert (report.n_clusters, report.n_noise, report.silhouette) == (1, 0, None)
    d = report.as_dict()
    assert d["NC"] == 1 and d["NP"] == 0 and d["SC"] == "unavailable"
    np.testing.assert_array_equal(points.messages, 0.5)


def test_analyze_logs_every_live_agent_step():
    agents = build_agents(SMALL_PP, CACL, 1)
    report, points = analyze_run(agents, SMALL_PP, episodes=7, seed=3)
    summary = evaluate(agents, SMALL_PP, 7, seed=3)
    assert len(points) == sum(r["length"] for r in summary.rows) * 2
    assert report.episodes == 7 and len(report.labels) == len(points)
    again, points2 = analyze_run(agents, SMALL_PP, episodes=7, seed=3)
    np.testing.assert_array_equal(points.messages, points2.messages)
    assert again.as_dict() == report.as_dict()


def test_analyze_rejects_silent_or_mismatched_agents():
    with pytest.raises(ValueError):
        analyze_run(build_agents(SMALL_PP, NO_COMM, 0), SMALL_PP)
    with pytest.raises(ValueError):
        analyze_run(build_agents(SMALL_PP, CACL, 0), EnvConfig.predator_prey())


def test_points_csv_columns(tmp_path):
    logged = np.array([[0, 0, 1, 0.1, 0.2, 0.3, 0.4], [2, 5, 0, 0.5, 0.6, 0.7, 0.8]])
    pts = MessagePointSet.from_log(logged)
    path = tmp_path / "points.csv"
    pts.write_csv(path, np.array([0, NOISE]))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["episode", "step", "agent", "m1", "m2", "m3", "m4", "label"]
    assert rows[2][:3] == ["2", "5", "0"] and rows[2][-1] == "-1"
    assert float(rows[1][3]) == 0.1


def test_report_file(tmp_path):
    report = ClusterReport.from_points(np.full((6, 4), 0.2), episodes=7)
    report.write(tmp_path / "report.txt")
    text = (tmp_path / "report.txt").read_text()
    assert "NC = 1\n" in text and "NP = 0\n" in text and "SC = unavailable\n" in text
