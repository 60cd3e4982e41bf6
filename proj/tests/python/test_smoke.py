import json

import numpy as np
import pytest

import neurofuse as nf


def test_version():
    assert nf.__version__ == "0.1.0"


def test_auc_matches_pair_count():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=40)
    labels = (rng.random(40) < 0.4).astype(int)
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert nf.roc_auc(scores.tolist(), labels.tolist()) == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)


def test_pearson_matches_numpy():
    x = np.random.default_rng(1).normal(size=(50, 6))
    assert np.allclose(nf.pearson_matrix(x), np.corrcoef(x, rowvar=False), atol=1e-12)


def test_windows_and_graphs():
    assert nf.sliding_windows(270) == [0, 20, 40, 60, 80, 100, 120, 140]
    series = np.random.default_rng(2).normal(size=(270, 5))
    adjacency, masks, starts = nf.dynamic_graphs(series)
    assert len(adjacency) == len(masks) == len(starts) == 8
    for a, b in zip(adjacency, masks):
        assert np.array_equal(np.diag(b), np.ones(5))
        assert np.allclose(a, a.T)
        assert np.all(a[b == 0] == 0)


def test_bh_rejects_small_pvalues():
    assert nf.bh_fdr_reject([0.001, 0.2, 0.04, 0.9], 0.05) == [True, False, False, False]


def test_errors_carry_kind():
    with pytest.raises(nf.NeurofuseError) as info:
        nf.dynamic_graphs(np.zeros((269, 4)))
    assert info.value.kind == "insufficient-data"
    assert info.value.module == "connectivity"
    with pytest.raises(nf.NeurofuseError) as info:
        nf.config_hash({"lr": "fast"})
    assert "lr" in str(info.value)


def test_config_hash_ignores_output():
    assert nf.config_hash({"output": "a"}) == nf.config_hash({"output": "b"})
    assert nf.config_hash({"seed": 2}) != nf.config_hash({})
    assert nf.canonical_config({})["q"] == 0.05


def test_cli_round_trip(tmp_path):
    cfg = {"gen_subjects": 20, "gen_regions": 6, "gen_systems": 2, "gen_planted_edges": 2}
    n, planted = nf.generate_dataset(cfg, tmp_path / "data")
    assert n == 20 and len(planted) == 2
    (tmp_path / "c.json").write_text(json.dumps({**cfg, "dataset": str(tmp_path / "data")}))
    code, out, _ = nf.run_cli(["connectivity", "--config", str(tmp_path / "c.json"), "--output", str(tmp_path / "g")])
    assert code == 0 and "20 graph caches" in out
    code, _, err = nf.run_cli(["evaluate", "--config", str(tmp_path / "missing.json")])
    assert code != 0


def test_kernel_gradcheck_passes():
    rows = nf.gradcheck()
    assert rows and all(ok for _, _, ok in rows)
