import json
import math

import numpy as np
import pytest
from scipy import stats

from queuenet import datagen, dists
from queuenet.datagen import (build_testset2, derive_seed, feature_dim, features_from_meta, gen_gg2_spec,
                              gen_ggc_spec, generate_dataset, instance_meta, label, preprocess, read_dataset)
from queuenet.simqueue import QueueSpec, SimConfig


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(1, i) for i in range(1000)}) == 1000
    assert derive_seed(1, 2) != derive_seed(2, 1)


# -- instance generation -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_ggc_spec_hits_target_load(seed):
    g = gen_ggc_spec(seed)
    s = g.spec
    lam = 1.0 / dists.mean(s.arrival)
    assert lam * dists.mean(s.services[0]) / s.c == pytest.approx(g.target_rho, abs=1e-9)
    assert 1 <= s.c <= 10
    assert datagen.RHO_MIN <= g.target_rho <= datagen.RHO_MAX


def test_server_count_uniform():
    cs = np.array([gen_ggc_spec(s).spec.c for s in range(10_000)])
    counts = np.bincount(cs, minlength=11)[1:]
    assert stats.chisquare(counts).pvalue > 0.01


def test_service_mean_from_load():
    # E[S] = c rho / lambda with unit-mean arrivals
    g = gen_ggc_spec(0)
    assert dists.mean(g.spec.services[0]) == pytest.approx(g.spec.c * g.target_rho)


@pytest.mark.parametrize("seed", range(20))
def test_gg2_rate_split(seed):
    g = gen_gg2_spec(seed)
    mu1, mu2 = g.service_rates
    assert mu1 + mu2 == pytest.approx(1.0 / g.target_rho, rel=1e-12)
    assert min(mu1, mu2) >= datagen.PHI
    for s, mu in zip(g.spec.services, (mu1, mu2)):
        assert dists.mean(s) == pytest.approx(1.0 / mu)


def test_gg2_measured_load_span():
    rhos = []
    for s in range(1000):
        g = gen_gg2_spec(s)
        rhos.append(label(g.spec, SimConfig(4000, seed=s))[1]["measured_rho"])
    rhos = np.array(rhos)
    assert rhos.min() < 0.02
    assert rhos.max() > 0.9


# -- features -----------------------------------------------------------------------------

def test_exponential_arrival_features():
    spec = QueueSpec(dists.exponential(1.0), (dists.exponential(0.5),), 7)
    f = preprocess(spec, 4)
    assert np.allclose(f[:4], [0.0, 0.6931, 1.7918, 3.1781], atol=1e-4)
    assert f[0] == 0.0
    assert f[-1] == 7
    assert f.shape == (feature_dim("ggc", 4),)


def test_service_scaling_shifts_log_moments():
    base = dists.gamma(1.0, 2.0)
    a = preprocess(QueueSpec(dists.exponential(1.0), (base,), 3), 4)
    b = preprocess(QueueSpec(dists.exponential(1.0), (dists.scale(base, 2.0),), 3), 4)
    assert np.allclose(b[4:8] - a[4:8], -np.arange(1, 5) * math.log(2.0), atol=1e-12)


def test_features_invariant_to_time_unit():
    spec = gen_ggc_spec(3).spec
    slow = QueueSpec(dists.scale(spec.arrival, 0.25), (dists.scale(spec.services[0], 0.25),), spec.c)
    assert np.allclose(preprocess(spec), preprocess(slow), atol=1e-9)


def test_hetero_canonical_order_and_swap():
    fast, slow = dists.exponential(0.5), dists.erlang(2, 3.0)
    a = preprocess(QueueSpec(dists.exponential(1.0), (fast, slow)))
    b = preprocess(QueueSpec(dists.exponential(1.0), (slow, fast)))
    assert np.array_equal(a, b)
    assert a.shape == (feature_dim("gg2", 4),)
    assert a[4] < a[8]   # faster server (smaller mean) first
    swapped = preprocess(QueueSpec(dists.exponential(1.0), (fast, slow)), swap=True)
    assert np.array_equal(swapped[4:], np.concatenate([a[8:], a[4:8]]))


@pytest.mark.parametrize("n", [1, 2, 4, 7])
def test_features_from_meta_matches_preprocess(n):
    for g, system in ((gen_ggc_spec(1), "ggc"), (gen_gg2_spec(2), "gg2")):
        meta = json.loads(json.dumps(instance_meta(g.spec, 4, g.target_rho)))
        assert np.allclose(features_from_meta(meta, n, system), preprocess(g.spec, n), atol=1e-12)


# -- labels -----------------------------------------------------------------------------

def test_mm1_label_geometric():
    spec = QueueSpec(dists.exponential(1.0), (dists.exponential(0.5),), 1)
    probs, info = label(spec, SimConfig(2_000_000, seed=3))
    assert np.abs(probs - 0.5 * 0.5 ** np.arange(500)).sum() < 0.01
    assert probs.shape == (500,) and probs.sum() >= 0.999
    assert not info["flagged"]


def test_label_flags_heavy_tail():
    spec = QueueSpec(dists.exponential(1.0), (dists.exponential(0.998),), 1)
    _, info = label(spec, SimConfig(200_000, seed=0))
    assert info["tail_mass"] > 1e-3 and info["flagged"]


# -- benchmark grid ---------------------------------------------------------------------

def test_testset_sizes():
    assert len(build_testset2("ggc")) == 6000
    assert len(build_testset2("gg2")) == 3600


def test_testset_load_grid():
    assert len(datagen.TESTSET2_RHOS) == 20
    assert datagen.TESTSET2_RHOS[0] == 0.01 and datagen.TESTSET2_RHOS[-1] == 0.96
    assert np.allclose(np.diff(datagen.TESTSET2_RHOS), 0.05)


def test_testset_specs_consistent():
    for g in build_testset2("ggc")[::97]:
        assert g.spec.offered_load() == pytest.approx(g.target_rho)
    for g in build_testset2("gg2", rate_split=0.7)[::97]:
        mu1, mu2 = g.service_rates
        assert mu1 / (mu1 + mu2) == pytest.approx(0.7)
        assert g.spec.offered_load() == pytest.approx(g.target_rho)


def test_named_family_shapes():
    assert dists.scv(datagen._named("E4")) == pytest.approx(0.25)
    for name, scv in (("LN(0.25)", 0.25), ("H2(4)", 4.0), ("LN(4)", 4.0), ("G(4)", 4.0), ("M", 1.0)):
        assert dists.scv(datagen._named(name)) == pytest.approx(scv)
        assert dists.mean(datagen._named(name)) == pytest.approx(1.0)


# -- dataset files -------------------------------------------------------------------------

CFG = SimConfig(5000)


def test_dataset_deterministic(tmp_path):
    a = generate_dataset("ggc", 6, CFG, 5, tmp_path / "a.jsonl")
    b = generate_dataset("ggc", 6, CFG, 5, tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert json.loads(lines[0]) == {"v": 1, "system": "ggc", "n": 4, "l": 500, "seed": 5,
                                    "arrivals": 5000, "warmup": 0.01, "augment_swap": False}
    assert len(lines) == 7


def test_dataset_parallel_matches_serial(tmp_path):
    a = generate_dataset("gg2", 5, CFG, 2, tmp_path / "a.jsonl", jobs=1)
    b = generate_dataset("gg2", 5, CFG, 2, tmp_path / "b.jsonl", jobs=2)
    assert a.read_bytes() == b.read_bytes()


def test_dataset_resume(tmp_path):
    full = generate_dataset("ggc", 5, CFG, 9, tmp_path / "full.jsonl")
    part = tmp_path / "part.jsonl"
    generate_dataset("ggc", 3, CFG, 9, part)
    # simulate a crash in the middle of a row
    part.write_text(part.read_text() + '{"index": 3, "feat')
    generate_dataset("ggc", 5, CFG, 9, part)
    assert part.read_bytes() == full.read_bytes()


def test_dataset_refuses_foreign_file(tmp_path):
    path = tmp_path / "d.jsonl"
    generate_dataset("ggc", 2, CFG, 1, path)
    before = path.read_bytes()
    with pytest.raises(ValueError, match="header"):
        generate_dataset("ggc", 2, CFG, 2, path)
    assert path.read_bytes() == before


def test_read_dataset_rows(tmp_path):
    path = generate_dataset("gg2", 3, CFG, 4, tmp_path / "d.jsonl", augment_swap=True)
    header, rows = read_dataset(path)
    assert header["system"] == "gg2"
    assert len(rows) == 6
    assert [r.index for r in rows] == [0, 0, 1, 1, 2, 2]
    for r in rows:
        assert r.features.shape == (12,)
        assert r.label.shape == (500,)
        assert r.meta["flagged"] is False
        assert 0 <= r.meta["measured_rho"] <= 1


def test_read_dataset_rejects_wrong_dimension(tmp_path):
    path = generate_dataset("ggc", 2, CFG, 4, tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    row = json.loads(lines[2])
    row["features"] = row["features"][:-1]
    lines[2] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="feature dimension"):
        read_dataset(path)


def test_generate_rejects_bad_args(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset("gg3", 1, CFG, 0, tmp_path / "x")
    with pytest.raises(ValueError):
        generate_dataset("ggc", 0, CFG, 0, tmp_path / "x")
