import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sobolev_proxy.datagen import (
    Dataset,
    MaskSpec,
    build_dataset,
    default_proportions,
    dumps_dataset,
    load_dataset,
    make_record,
    sample_mask,
    sample_parameters,
    save_dataset,
    split_counts,
)
from sobolev_proxy.problems import Markowitz, ToyQP, get_problem
from sobolev_proxy.sensitivity import DEGENERATE, REGULAR


def line_structure(block):
    varying = [j for j in range(block.shape[1]) if np.ptp(block[:, j]) > 0]
    return varying


class TestSampleParameters:
    def test_box_is_uniform(self):
        P = sample_parameters(ToyQP(2, p_lo=0.0, p_hi=1.0), 1000, (1, 0, 0), seed=3)
        assert P.shape == (1000, 2)
        assert P.min() >= 0.0 and P.max() <= 1.0
        assert np.all(np.abs(P.mean(axis=0) - 0.5) <= 0.05)

    def test_single_line_is_an_even_grid(self):
        prob = ToyQP(3, p_lo=0.0, p_hi=1.0)
        P = sample_parameters(prob, 11, (0, 1, 0), seed=5)
        varying = line_structure(P)
        assert len(varying) == 1
        j = varying[0]
        np.testing.assert_allclose(P[:, j], np.linspace(0.0, 1.0, 11), atol=1e-15)

    def test_mixed_proportions_are_exact(self):
        prob = get_problem("acopf3")
        P = sample_parameters(prob, 100, (0.5, 0.3, 0.2), seed=1, line_length=10)
        assert P.shape == (100, 6)
        lines = P[50:80]
        for k in range(3):
            assert len(line_structure(lines[10 * k : 10 * (k + 1)])) == 1
        ratios = P[80:] / prob.reference_parameter()
        assert np.allclose(ratios, ratios[:, :1], rtol=1e-12)
        assert np.all((P >= prob.p_lo - 1e-12) & (P <= prob.p_hi + 1e-12))

    def test_nonpositive_count(self):
        with pytest.raises(ValueError):
            sample_parameters(ToyQP(), 0)

    def test_bad_proportions(self):
        with pytest.raises(ValueError):
            sample_parameters(ToyQP(), 10, (0.5, 0.6, 0.1))

    @given(st.integers(1, 500), st.lists(st.integers(0, 10), min_size=3, max_size=3).filter(lambda v: sum(v) > 0))
    def test_split_counts_sum(self, count, weights):
        props = np.array(weights) / sum(weights)
        parts = split_counts(count, props)
        assert sum(parts) == count
        assert all(abs(a - count * w) < 1 for a, w in zip(parts, props))

    def test_default_proportions(self):
        assert default_proportions(get_problem("acopf3")) == (0.6, 0.2, 0.2)
        assert default_proportions(get_problem("markowitz-3")) == (0.8, 0.2, 0.0)


class TestSampleMask:
    def test_dense(self):
        m = sample_mask(3, 4, 0.0, seed=0)
        assert len(m.kept_entries) == 12

    def test_sparse_count(self):
        assert len(sample_mask(20, 20, 0.95, seed=0).kept_entries) == 20

    def test_at_least_one_entry(self):
        assert len(sample_mask(1, 1, 0.95, seed=0).kept_entries) == 1

    def test_same_seed_same_mask(self):
        assert sample_mask(5, 6, 0.7, seed=[1, 2, 3]) == sample_mask(5, 6, 0.7, seed=[1, 2, 3])

    def test_invalid_sparsity(self):
        with pytest.raises(ValueError):
            sample_mask(2, 2, 1.0)

    @given(st.integers(1, 12), st.integers(1, 12), st.floats(0.0, 0.99), st.integers(0, 1000))
    def test_invariants(self, n, d, s, seed):
        m = sample_mask(n, d, s, seed)
        assert len(m.kept_entries) == max(1, round((1 - s) * n * d))
        assert len(set(m.kept_entries)) == len(m.kept_entries)
        assert all(0 <= r < n and 0 <= c < d for r, c in m.kept_entries)
        assert m.as_array(n, d).sum() == len(m.kept_entries)


class TestBuildDataset:
    def test_toy_qp_all_ones(self):
        data, meta = build_dataset(ToyQP(), (100, 0, 0), (1, 0, 0), sparsity=0.95, seed=0)
        recs = data["train"].records
        assert len(recs) == 100 and meta["train"]["solver_failures"] == 0
        assert all(r.regularity == REGULAR for r in recs)
        assert all(v == pytest.approx(1.0, abs=1e-12) for r in recs for _, _, v in r.jac_entries)

    def test_budget_binding_active_set_is_shared(self):
        prob = Markowitz(
            np.diag([0.04, 0.09, 0.01]),
            mu_box=([0.18, 0.02, 0.02], [0.20, 0.10, 0.10]),
            sigma_box=(0.5, 1.0),
        )
        data, _ = build_dataset(prob, (30, 0, 0), (1, 0, 0), sparsity=0.5, seed=2)
        recs = data["train"].records
        assert len(recs) == 30
        # multipliers: [risk, budget, x0 >= 0, x1 >= 0, x2 >= 0]
        pattern = {tuple(r.lam > 1e-6) for r in recs}
        assert pattern == {(False, True, False, True, True)}

    def test_empty_counts(self, tmp_path):
        data, meta = build_dataset(ToyQP(), (0, 0, 0))
        for split, ds in data.items():
            assert len(ds) == 0
            save_dataset(ds, tmp_path / f"{split}.jsonl")
            back = load_dataset(tmp_path / f"{split}.jsonl")
            assert len(back) == 0 and back.problem_name == "toy-qp"

    def test_masks_differ_between_records(self):
        data, _ = build_dataset(get_problem("toy-qp-4"), (20, 0, 0), (1, 0, 0), sparsity=0.75, seed=4)
        masks = {r.mask.kept_entries for r in data["train"].records}
        assert len(masks) > 1

    def test_jac_entries_follow_mask(self):
        data, _ = build_dataset(get_problem("markowitz-4"), (20, 0, 0), sparsity=0.5, seed=9)
        for r in data["train"].records:
            if r.regular:
                assert [(a, b) for a, b, _ in r.jac_entries] == list(r.mask.kept_entries)
            else:
                assert r.jac_entries == []

    def test_degenerate_record_is_kept_without_jacobian(self):
        prob = ToyQP(p_lo=-1.0, p_hi=1.0)
        rec = make_record(prob, np.array([0.0]), MaskSpec(((0, 0),), 0.0))
        assert rec.regularity == DEGENERATE and rec.jac_entries == []

    def test_parallel_matches_serial(self):
        prob = get_problem("markowitz-3")
        a, _ = build_dataset(prob, (12, 4, 0), seed=6, threads=1)
        b, _ = build_dataset(prob, (12, 4, 0), seed=6, threads=2, problem_name="markowitz-3")
        for split in a:
            assert dumps_dataset(a[split]) == dumps_dataset(b[split])


class TestPersistence:
    def test_round_trip_is_exact(self, tmp_path):
        data, _ = build_dataset(get_problem("acopf3"), (10, 0, 0), sparsity=0.8, seed=11)
        ds = data["train"]
        save_dataset(ds, tmp_path / "a.jsonl")
        back = load_dataset(tmp_path / "a.jsonl")
        assert (back.problem_name, back.n, back.d) == (ds.problem_name, ds.n, ds.d)
        for r, s in zip(ds.records, back.records):
            assert np.array_equal(r.p, s.p) and np.array_equal(r.x_star, s.x_star)
            assert np.array_equal(r.lam, s.lam) and r.objective == s.objective
            assert r.jac_entries == s.jac_entries and r.mask == s.mask and r.regularity == s.regularity
        assert dumps_dataset(back) == dumps_dataset(ds)

    def test_header_fields(self, tmp_path):
        data, _ = build_dataset(ToyQP(), (3, 0, 0))
        save_dataset(data["train"], tmp_path / "t.jsonl")
        head = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
        assert {"problem", "n", "d", "config"} <= set(head)

    def test_dimension_mismatch_rejected(self, tmp_path):
        ds = Dataset("toy-qp", 1, 1, "train")
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(ds.header()) + "\n" + json.dumps({"p": [1, 2], "x": [1], "lambda": [0], "obj": 0, "mask": [[0, 0]], "jac": [], "reg": "regular"}) + "\n")
        with pytest.raises(ValueError):
            load_dataset(path)

    def test_empty_file_rejected(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "e.jsonl")
