"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS lines.
Golden values referenced here were produced once by the brute-force oracle
pipeline (tests/gen_goldens.py) and are compared exactly.
"""

import io
import json
import math
import struct
import time
from statistics import median

import numpy as np
import pytest

import oracles
from placerec.attention import (
    attention_output,
    cls_attention_scores,
    project_facets,
    select_keypoints,
    softmax,
)
from placerec.cli import main
from placerec.evaluation import EARTH_RADIUS_M, Protocol, is_correct, recall_at_k
from placerec.matching import mutual_nn_pairs, rerank_candidates
from placerec.pipeline import PlaceRetriever
from placerec.ranking import rank
from placerec.store import (
    FeatureSet,
    GeoTag,
    read_feature_set,
    validate,
    write_feature_set,
)

from conftest import (
    GOLDEN_DIR,
    REFERENCE_CONFIG,
    make_local,
    make_record,
    random_feature_set,
    unit,
    unit_rows,
)
from test_attention import random_weights


def ok(label: str) -> None:
    print(f"\nACCEPTANCE PASS: {label}")


@pytest.fixture(scope="module")
def golden_recall():
    return json.loads((GOLDEN_DIR / "reference_recall.json").read_text())


@pytest.fixture(scope="module")
def golden_results():
    return json.loads((GOLDEN_DIR / "reference_results.json").read_text())


@pytest.fixture(scope="module")
def reference_files(reference_data, tmp_path_factory):
    gallery, queries, _ = reference_data
    out = tmp_path_factory.mktemp("reference")
    from placerec.store import write_feature_set_file

    write_feature_set_file(gallery, out / "gallery.efvp")
    write_feature_set_file(queries, out / "queries.efvp")
    return out


def test_oracle_equivalence_mnn():
    """1,000 random instances, t2 in {0, 0.65, 0.9}: exact pair-set equality."""
    rng = np.random.default_rng(2024)
    started = time.monotonic()
    for trial in range(1000):
        na, nb = int(rng.integers(0, 65)), int(rng.integers(0, 65))
        d = int(rng.integers(1, 65))
        t2 = (0.0, 0.65, 0.9)[trial % 3]
        ra, rb = unit_rows(rng, na, d), unit_rows(rng, nb, d)
        a = [make_local(0.5, r) for r in ra]
        b = [make_local(0.5, r) for r in rb]
        got = [(p.query_idx, p.cand_idx) for p in mutual_nn_pairs(a, b, t2)]
        assert got == oracles.mnn_pairs(ra, rb, t2), f"instance {trial}"
    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    ok(f"oracle equivalence, mutual NN (1000 instances, {elapsed:.1f}s)")


def test_oracle_equivalence_ranking():
    """200 random galleries up to 1,000 records: full-sort oracle, tie-breaks included."""
    rng = np.random.default_rng(77)
    started = time.monotonic()
    for trial in range(200):
        n = int(rng.integers(1, 1001))
        d = int(rng.integers(2, 65))
        rows = unit_rows(rng, n, d)
        if n >= 4 and trial % 2 == 0:  # plant exact ties via duplicate rows
            dup = int(rng.integers(0, n - 1))
            rows[dup + 1] = rows[dup]
            rows[n - 1] = rows[dup]
        fs = FeatureSet(
            d_g=d, d_l=1,
            records=[make_record(f"r{i}", row) for i, row in enumerate(rows)],
        )
        q = unit(rng.standard_normal(d))
        k = int(rng.integers(1, n + 1))
        got = rank(q, fs, k)
        want = oracles.rank(q, rows, k)
        assert list(got.indices) == [i for i, _ in want], f"gallery {trial}"
        assert [float(s) for s in got.similarities] == [s for _, s in want]
    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    ok(f"oracle equivalence, ranking (200 galleries, {elapsed:.1f}s)")


def test_facet_math_oracles():
    """500 random instances, h in {1,4}: all four operations vs float64 oracles."""
    rng = np.random.default_rng(4242)
    started = time.monotonic()
    for trial in range(500):
        heads = 1 if trial % 2 == 0 else 4
        p = int(rng.integers(1, 65))
        d_model = int(rng.integers(1, 65))
        d = heads * int(rng.integers(1, 65 // heads + 1))
        tokens = rng.standard_normal((p + 1, d_model)).astype(np.float32)
        w = random_weights(rng, d_model, d, heads=heads, with_bias=bool(trial % 3))
        f = project_facets(tokens, w)

        np.testing.assert_allclose(f.q, oracles.project_qkv(tokens, w.w_q, w.b_q), atol=1e-4)
        np.testing.assert_allclose(f.v, oracles.project_qkv(tokens, w.w_v, w.b_v), atol=1e-4)

        if trial % 5 == 0:  # attention oracle is the slow one
            np.testing.assert_allclose(
                attention_output(f), oracles.attention(f.q, f.k, f.v), atol=1e-4
            )

        s = cls_attention_scores(f)
        np.testing.assert_allclose(
            s, oracles.cls_scores(f.q, f.cls_key, heads=heads), atol=1e-5
        )
        assert abs(float(s.astype(np.float64).sum()) - 1.0) <= 1e-5

        logits = rng.standard_normal(int(rng.integers(1, 64))).astype(np.float32) * 5
        np.testing.assert_allclose(softmax(logits), oracles.softmax(logits), atol=1e-7)
    elapsed = time.monotonic() - started
    ok(f"facet math vs float64 oracles (500 instances, {elapsed:.1f}s)")


def test_threshold_laws():
    """t2 pair containment and t1 keypoint monotonicity, 1,000 instances each."""
    rng = np.random.default_rng(99)
    for _ in range(1000):
        na, nb = int(rng.integers(1, 24)), int(rng.integers(1, 24))
        d = int(rng.integers(2, 17))
        a = [make_local(0.5, r) for r in unit_rows(rng, na, d)]
        b = [make_local(0.5, r) for r in unit_rows(rng, nb, d)]
        lo, hi = sorted(rng.uniform(-1, 1, size=2))
        loose = {(p.query_idx, p.cand_idx) for p in mutual_nn_pairs(a, b, lo)}
        tight = {(p.query_idx, p.cand_idx) for p in mutual_nn_pairs(a, b, hi)}
        assert tight <= loose

    for _ in range(1000):
        p = int(rng.integers(1, 33))
        d = int(rng.integers(2, 17))
        f_q = rng.standard_normal((p + 1, d)).astype(np.float32)
        from placerec.attention import LayerFacets

        facets = LayerFacets(
            q=f_q, k=rng.standard_normal((p + 1, d)).astype(np.float32),
            v=rng.standard_normal((p + 1, d)).astype(np.float32),
        )
        scores = cls_attention_scores(facets)
        lo, hi = sorted(rng.uniform(0, 1, size=2))
        assert len(select_keypoints(facets, scores, hi)) <= len(
            select_keypoints(facets, scores, lo)
        )
        assert len(select_keypoints(facets, scores, 0.0)) == p
        assert select_keypoints(facets, scores, 1.0) == []
    ok("threshold laws: t2 containment and t1 monotonicity (1000 + 1000 instances)")


def test_protocol_boundaries():
    """Inclusive/exclusive behavior exactly at the frame and radius boundaries."""
    meters_per_degree = EARTH_RADIUS_M * math.pi / 180.0
    probe = make_record("q", unit([1.0, 0.0]), GeoTag.latlon(0.0, 0.0))

    def at(meters):
        return make_record("g", unit([1.0, 0.0]), GeoTag.latlon(0.0, meters / meters_per_degree))

    from placerec.evaluation import haversine_m

    assert haversine_m(probe.geo, at(25.0).geo) == 25.0  # arc construction is exact
    for meters, inc_want, exc_want in ((24.9, True, True), (25.0, True, False), (25.1, False, False)):
        assert is_correct(probe, at(meters), Protocol.radius(25.0)) is inc_want
        assert is_correct(probe, at(meters), Protocol.radius(25.0, inclusive=False)) is exc_want

    f100 = make_record("q", unit([1.0, 0.0]), GeoTag.frame_index(100))

    def frame(n):
        return make_record("g", unit([1.0, 0.0]), GeoTag.frame_index(n))

    for delta, inc_want, exc_want in ((9, True, True), (10, True, False), (11, False, False)):
        assert is_correct(f100, frame(100 + delta), Protocol.frames(10)) is inc_want
        assert is_correct(f100, frame(100 + delta), Protocol.frames(10, inclusive=False)) is exc_want
    ok("protocol boundaries at 24.9/25.0/25.1 m and +-9/10/11 frames, both flags")


def test_end_to_end_synthetic_rescue(reference_data, golden_recall, golden_results):
    """Reference config: re-ranking strictly beats the first stage; both equal goldens."""
    started = time.monotonic()
    gallery, queries, _ = reference_data
    protocol = Protocol.radius(25.0)

    first = PlaceRetriever(rerank=False).fit(gallery).retrieve(queries)
    first_table = recall_at_k(
        [r.gallery_indices for r in first], queries, gallery, protocol, (1, 5, 10)
    )
    reranked = PlaceRetriever().fit(gallery).retrieve(queries)
    rerank_table = recall_at_k(
        [r.gallery_indices for r in reranked], queries, gallery, protocol, (1, 5, 10)
    )

    assert rerank_table.values[0] > first_table.values[0]
    for pos, k in enumerate((1, 5, 10)):
        assert first_table.values[pos] == golden_recall["first_stage"][str(k)]
        assert rerank_table.values[pos] == golden_recall["post_rerank"][str(k)]

    # the full per-query ordering matches the oracle run, id for id
    for qres in reranked:
        want = golden_results[qres.query_id]
        assert qres.gallery_ids == [gid for gid, _ in want]
        assert qres.match_counts == [count for _, count in want]

    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    ok(
        "end-to-end rescue: first-stage R@1 "
        f"{first_table.values[0]:.4f} < post-rerank {rerank_table.values[0]:.4f}, "
        f"goldens exact ({elapsed:.1f}s)"
    )


def test_small_k_stability(reference_data, golden_recall):
    """R@1 at k=5 within 0.02 of k=100 on the reference set."""
    gallery, queries, _ = reference_data
    protocol = Protocol.radius(25.0)
    r1 = {}
    for k in (5, 100):
        out = PlaceRetriever(k=k).fit(gallery).retrieve(queries)
        table = recall_at_k([r.gallery_indices for r in out], queries, gallery, protocol, (1,))
        r1[k] = table.values[0]
    assert r1[5] == golden_recall["post_rerank_k5_r1"]
    assert abs(r1[5] - r1[100]) <= 0.02
    ok(f"small-k stability: |R@1(k=5) − R@1(k=100)| = {abs(r1[5] - r1[100]):.4f} <= 0.02")


def test_degenerate_thresholds(reference_data):
    """t2=0.999 and t1>=1 both collapse re-ranking to the first-stage order."""
    gallery, queries, _ = reference_data
    base = PlaceRetriever(rerank=False).fit(gallery).retrieve(queries)
    high_t2 = PlaceRetriever(match_threshold=0.999).fit(gallery).retrieve(queries)
    high_t1 = PlaceRetriever(keypoint_threshold=1.0).fit(gallery).retrieve(queries)
    for b, t2_run, t1_run in zip(base, high_t2, high_t1):
        assert t2_run.gallery_ids == b.gallery_ids
        assert all(c == 0 for c in t2_run.match_counts)
        assert t1_run.gallery_ids == b.gallery_ids
        assert all(c == 0 for c in t1_run.match_counts)
    ok("degeneracy: t2=0.999 and t1=1.0 reproduce first-stage order with zero counts")


def test_container_format_at_scale():
    """10,000-record bit-exact round-trip; validation catches 8 corruption classes."""
    rng = np.random.default_rng(31337)
    fs = random_feature_set(rng, 10_000, d_g=32, d_l=8, locals_range=(0, 2), geo="latlon")
    buf = io.BytesIO()
    write_feature_set(fs, buf)
    first_bytes = buf.getvalue()
    back = read_feature_set(first_bytes)
    assert back == fs
    buf2 = io.BytesIO()
    write_feature_set(back, buf2)
    assert buf2.getvalue() == first_bytes

    corruptions = {
        "global-dim": lambda r: setattr(r, "global_descriptor", np.float32([1.0, 0.0])),
        "global-norm": lambda r: setattr(
            r, "global_descriptor", r.global_descriptor * np.float32(0.5)
        ),
        "local-dim": lambda r: r.locals.append(make_local(0.5, unit([1, 1]))),
        "local-norm": lambda r: r.locals.append(
            make_local(0.5, np.float32([2.0] + [0.0] * 7))
        ),
        "score-zero": lambda r: r.locals.append(make_local(0.0, unit(np.ones(8)))),
        "score-high": lambda r: r.locals.append(make_local(1.5, unit(np.ones(8)))),
        "lat-range": lambda r: setattr(r, "geo", GeoTag.latlon(95.0, 0.0)),
        "lon-range": lambda r: setattr(r, "geo", GeoTag.latlon(0.0, 185.0)),
    }
    assert len(corruptions) == 8
    for name, mutate in corruptions.items():
        rng2 = np.random.default_rng(7)
        small = random_feature_set(rng2, 50, d_g=32, d_l=8, locals_range=(0, 2), geo="latlon")
        target = small.records[17]
        mutate(target)
        report = validate(small)
        assert any(e.record_id == target.id for e in report.entries), name
    ok("container format: 10k-record bit-exact round-trip, 8 corruption classes caught")


def test_match_latency_magnitude():
    """Median per-candidate match time at |a|=|b|=300, d_l=64 stays within 5 ms."""
    rng = np.random.default_rng(1)
    a = [make_local(0.5, r) for r in unit_rows(rng, 300, 64)]
    b = [make_local(0.5, r) for r in unit_rows(rng, 300, 64)]
    mutual_nn_pairs(a, b, 0.65)  # warm-up
    times = []
    for _ in range(30):
        t0 = time.perf_counter()
        mutual_nn_pairs(a, b, 0.65)
        times.append((time.perf_counter() - t0) * 1000.0)
    med = median(times)
    assert med <= 5.0
    ok(f"match latency: median {med:.2f} ms at 300x300, d_l=64 (limit 5 ms)")


def test_cli_server_parity(reference_files, golden_results):
    """cmd_retrieve and POST /v1/query order results identically on the reference set."""
    from fastapi.testclient import TestClient

    from placerec.server import create_app
    from placerec.store import read_feature_set_file

    out = reference_files / "results.jsonl"
    assert main([
        "retrieve",
        "--gallery", str(reference_files / "gallery.efvp"),
        "--queries", str(reference_files / "queries.efvp"),
        "--out", str(out),
    ]) == 0
    cli_rows = {
        row["query_id"]: row["results"]
        for row in map(json.loads, out.read_text().splitlines())
    }

    # the CLI output at defaults reproduces the oracle pipeline's golden file
    assert set(cli_rows) == set(golden_results)
    for qid, entries in cli_rows.items():
        want = golden_results[qid]
        assert [e["id"] for e in entries] == [gid for gid, _ in want]
        assert [e["mnn_count"] for e in entries] == [count for _, count in want]

    # the reference recall CSV comes out of cmd_eval with the golden numbers
    assert main([
        "eval", "--results", str(out),
        "--queries", str(reference_files / "queries.efvp"),
        "--gallery", str(reference_files / "gallery.efvp"),
        "--out", str(reference_files / "recall"),
    ]) == 0
    csv_text = (reference_files / "recall.csv").read_text()
    assert "1,1.0000,200" in csv_text and "10,1.0000,200" in csv_text

    queries = read_feature_set_file(reference_files / "queries.efvp")
    client = TestClient(create_app(gallery_path=str(reference_files / "gallery.efvp")))
    health = client.get("/v1/health").json()
    assert health["gallery_size"] == 1000  # 200 places x 5 images
    for rec in queries.records:
        body = {
            "global_descriptor": [float(x) for x in rec.global_descriptor],
            "locals": [
                {"score": f.score, "descriptor": [float(x) for x in f.descriptor]}
                for f in rec.locals
            ],
            "k": 100,
            "rerank": True,
        }
        resp = client.post("/v1/query", json=body)
        assert resp.status_code == 200
        got = resp.json()["results"]
        want = cli_rows[rec.id]
        assert [e["id"] for e in got] == [e["id"] for e in want]
        assert [e["mnn_count"] for e in got] == [e["mnn_count"] for e in want]
    ok("CLI/server parity: identical orderings for all 200 reference queries")
