import json
import math
import urllib.request

import pytest

import nfb


def test_cohens_d_matches_hand_value():
    es = nfb.cohens_d([0.0, 2.0], [2.0, 4.0])
    assert es.d == pytest.approx(math.sqrt(2.0), abs=1e-12)
    assert es.se == pytest.approx(math.sqrt(1.0 + 2.0 / 8.0), abs=1e-12)
    assert (es.n0, es.n1) == (2, 2)


def test_degenerate_variance_raises():
    with pytest.raises(nfb.NfbError):
        nfb.cohens_d([1.0, 1.0], [1.0, 1.0])


def test_labels_and_thresholds():
    assert nfb.median_threshold([3.0, 1.0, 2.0, 10.0]) == 2.5
    assert nfb.binarize(2.5, 2.5) == 1
    assert nfb.binarize(2.4, 2.5) == 0
    scores = [float(i) - 49.5 for i in range(100)]
    neg, pos = nfb.quantile_bins(scores, 8)
    assert len(neg) == 5 and len(pos) == 5
    assert neg[-1] == 0.0 and pos[0] == 0.0
    assert nfb.ordinal_bin(-1e9, neg, pos) == 1
    assert nfb.ordinal_bin(1e9, neg, pos) == 8
    assert nfb.control_precision([2.0, 0.5, 0.5], 0) == pytest.approx(2.0)


def test_pca_and_logistic():
    rows = [[3.0 * math.cos(i), 0.5 * math.sin(3 * i), 0.1 * ((i * 7) % 5)] for i in range(40)]
    pcs = nfb.fit_pca(rows, 2)
    assert [p["id"] for p in pcs] == ["PC1", "PC2"]
    assert pcs[0]["explained_variance_ratio"] >= pcs[1]["explained_variance_ratio"]
    assert sum(x * x for x in pcs[0]["direction"]) == pytest.approx(1.0, abs=1e-9)
    labels = [1 if r[0] > 0 else 0 for r in rows]
    fit = nfb.fit_logistic(rows, labels, l2=1e-8)
    assert fit["training_accuracy"] == 1.0


def test_prompts_and_conditions():
    text = nfb.build_report_prompt([("The cat sat.", 1), ("Rain fell.", 0)], "A dog ran.")
    assert "The cat sat." in text and "A dog ran." in text
    flipped = nfb.build_report_prompt([("The cat sat.", 1), ("Rain fell.", 0)], "A dog ran.", flipped=True)
    assert flipped != text
    implicit = nfb.build_control_prompt([("The cat sat.", 1)], 0, provided_sentence="Rain fell.")
    assert "Rain fell." in implicit
    conds = nfb.counterbalanced_conditions()
    assert [c["imitated_side"] for c in conds] == [0, 1, 1, 0]
    with pytest.raises(nfb.NfbError):
        nfb.build_report_prompt([("x.", 1)], "y.", label_mode="likert")


def test_toy_backend_in_process_and_over_http():
    info = json.loads(nfb.toy_model_info())
    assert info["layer_count"] >= 1
    assert nfb.select_layers(32) == [1, 8, 16, 24, 32]

    results = nfb.run_conformance("toy")
    assert results and all(passed for _, passed, _ in results)

    server = nfb.ToyServer()
    port = server.start()
    try:
        assert port > 0
        with urllib.request.urlopen(server.url + "/v1/model", timeout=10) as r:
            assert json.loads(r.read()) == info
        remote = nfb.run_conformance(server.url)
        assert [n for n, _, _ in remote] == [n for n, _, _ in results]
        assert all(passed for _, passed, _ in remote)
    finally:
        server.stop()
