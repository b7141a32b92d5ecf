import numpy as np
import pytest

from kernelnn.genotype import (
    CodingStateError,
    EmptyResultError,
    GenotypeMatrix,
    GenotypeParseError,
    GenotypeValueError,
    QcReport,
    QcThresholds,
    align_to_samples,
    apply_qc,
    load_covariates,
    load_genotypes,
    load_phenotype,
    recode,
    save_genotypes,
)
from kernelnn.simulate import gen_genotypes


def write(path, text):
    path.write_text(text)
    return path


class TestLoadGenotypes:
    def test_small_csv(self, tmp_path):
        path = write(tmp_path / "g.csv", "id,rs1,rs2\na,0,1\nb,2,0\nc,1,NA\n")
        G = load_genotypes(path)
        assert G.n == 3 and G.p == 2
        assert G.sample_ids == ["a", "b", "c"]
        assert G.snp_ids == ["rs1", "rs2"]
        np.testing.assert_array_equal(G.values[:, 0], [0, 2, 1])
        assert np.isnan(G.values[2, 1])

    def test_tsv(self, tmp_path):
        path = write(tmp_path / "g.tsv", "id\trs1\na\t0\nb\t2\n")
        G = load_genotypes(path)
        assert G.p == 1

    def test_out_of_domain_value(self, tmp_path):
        path = write(tmp_path / "g.csv", "id,rs1,rs2\na,0,3\nb,1,1\n")
        with pytest.raises(GenotypeValueError, match=r"row 1.*col 2"):
            load_genotypes(path)

    def test_non_numeric_value(self, tmp_path):
        path = write(tmp_path / "g.csv", "id,rs1\na,x\nb,1\n")
        with pytest.raises(GenotypeValueError, match="row 1"):
            load_genotypes(path)

    def test_ragged_row(self, tmp_path):
        path = write(tmp_path / "g.csv", "id,rs1,rs2\na,0,1\nb,2\nc,1,0\n")
        with pytest.raises(GenotypeParseError, match="row 2"):
            load_genotypes(path)

    def test_empty_file(self, tmp_path):
        with pytest.raises(GenotypeParseError):
            load_genotypes(write(tmp_path / "g.csv", ""))

    def test_roundtrip_bit_exact(self, tmp_path):
        G = gen_genotypes(100, 500, seed=7)
        values = G.values.copy()
        values[np.random.default_rng(1).uniform(size=values.shape) < 0.05] = np.nan
        G = GenotypeMatrix(values, G.sample_ids, G.snp_ids)
        path = tmp_path / "big.csv"
        save_genotypes(G, path)
        back = load_genotypes(path)
        np.testing.assert_array_equal(back.values, G.values)
        assert back.sample_ids == G.sample_ids
        assert back.snp_ids == G.snp_ids


class TestQc:
    def test_call_rate_drop(self):
        rng = np.random.default_rng(0)
        values = rng.integers(0, 3, size=(20, 2)).astype(float)
        values[:10, 0] = np.nan  # 50% missing
        G = GenotypeMatrix(values, [f"s{i}" for i in range(20)], ["bad", "ok"])
        filtered, report = apply_qc(G, QcThresholds(min_call_rate=0.9, min_maf=0.0 + 1e-9))
        assert report.dropped_call_rate == ["bad"]
        assert filtered.snp_ids == ["ok"]

    def test_monomorphic_dropped_by_maf(self):
        values = np.column_stack([np.zeros(30), np.random.default_rng(3).integers(0, 3, 30)])
        G = GenotypeMatrix(values.astype(float), [f"s{i}" for i in range(30)], ["mono", "poly"])
        filtered, report = apply_qc(G)
        assert report.dropped_maf == ["mono"]
        assert report.maf["mono"] == 0.0

    def test_hwe_calibration_monte_carlo(self):
        # 200 columns under HWE at alpha = 0.05 should be retained ~95% of the time
        rng = np.random.default_rng(42)
        n, cols = 10_000, 200
        values = rng.binomial(2, 0.3, size=(n, cols)).astype(float)
        G = GenotypeMatrix(values, [f"s{i}" for i in range(n)], [f"snp{j}" for j in range(cols)])
        _, report = apply_qc(G, QcThresholds(min_call_rate=0.5, min_maf=0.01, hwe_alpha=0.05))
        retained_frac = report.n_retained / cols
        # binomial SE ~ sqrt(0.95*0.05/200) ~ 0.015; allow 3 SE
        assert 0.90 <= retained_frac <= 0.995

    def test_hwe_violation_dropped(self):
        # no heterozygotes at intermediate allele frequency: extreme HWE violation
        values = np.column_stack([
            np.repeat([0.0, 2.0], 100),
            np.resize([0.0, 1.0, 2.0, 1.0], 200),
        ])
        G = GenotypeMatrix(values, [f"s{i}" for i in range(200)], ["viol", "ok"])
        _, report = apply_qc(G, QcThresholds(hwe_alpha=1e-6))
        assert report.dropped_hwe == ["viol"]

    def test_imputation_and_idempotence(self):
        rng = np.random.default_rng(5)
        values = rng.binomial(2, 0.4, size=(50, 10)).astype(float)
        values[rng.uniform(size=values.shape) < 0.05] = np.nan
        G = GenotypeMatrix(values, [f"s{i}" for i in range(50)], [f"m{j}" for j in range(10)])
        filtered, report = apply_qc(G)
        assert not np.isnan(filtered.values).any()
        assert report.imputed_entries == int(np.isnan(values[:, [G.snp_ids.index(s) for s in filtered.snp_ids]]).sum())
        again, report2 = apply_qc(filtered, QcThresholds())
        np.testing.assert_array_equal(again.values, filtered.values)
        assert report2.n_dropped == 0
        assert report2.imputed_entries == 0

    def test_order_preserved(self):
        rng = np.random.default_rng(11)
        values = rng.binomial(2, 0.4, size=(40, 6)).astype(float)
        values[:, 2] = 0.0  # monomorphic, dropped
        G = GenotypeMatrix(values, [f"s{i}" for i in range(40)], list("abcdef"))
        filtered, _ = apply_qc(G)
        assert filtered.snp_ids == ["a", "b", "d", "e", "f"]
        assert filtered.sample_ids == G.sample_ids

    def test_all_dropped(self):
        values = np.zeros((10, 3))
        G = GenotypeMatrix(values, [f"s{i}" for i in range(10)], ["a", "b", "c"])
        with pytest.raises(EmptyResultError) as excinfo:
            apply_qc(G)
        assert excinfo.value.report.n_retained == 0

    def test_requires_additive(self):
        values = np.array([[0.0, 1.0], [1.0, 0.0]])
        G = GenotypeMatrix(values, ["a", "b"], ["x", "y"], coding="dominant")
        with pytest.raises(CodingStateError):
            apply_qc(G)

    def test_report_accounting_validated(self):
        with pytest.raises(ValueError):
            QcReport(n_input=3, n_retained=1, dropped_maf=["a"])


class TestRecode:
    def make(self, column):
        values = np.tile(np.asarray(column, dtype=float)[:, None], (1, 2))
        return GenotypeMatrix(values, [f"s{i}" for i in range(len(column))], ["m1", "m2"])

    def test_dominant_mapping(self):
        G = recode(self.make([0, 1, 2]), "dominant")
        np.testing.assert_array_equal(G.values[:, 0], [0, 1, 1])
        assert G.coding == "dominant"

    def test_recessive_mapping(self):
        G = recode(self.make([0, 1, 2]), "recessive")
        np.testing.assert_array_equal(G.values[:, 0], [0, 0, 1])

    def test_heterozygotes_fixed_under_dominant(self):
        G = recode(self.make([1, 1, 1]), "dominant")
        np.testing.assert_array_equal(G.values[:, 0], [1, 1, 1])

    def test_output_binary(self, rng):
        values = rng.integers(0, 3, size=(30, 8)).astype(float)
        G = GenotypeMatrix(values, [f"s{i}" for i in range(30)], [f"m{j}" for j in range(8)])
        for mode in ("dominant", "recessive"):
            out = recode(G, mode)
            assert set(np.unique(out.values)) <= {0.0, 1.0}

    def test_missing_preserved(self):
        values = np.array([[0.0, np.nan], [2.0, 1.0], [1.0, 0.0]])
        G = GenotypeMatrix(values, ["a", "b", "c"], ["x", "y"])
        out = recode(G, "dominant")
        assert np.isnan(out.values[0, 1])

    def test_already_recoded_rejected(self):
        G = recode(self.make([0, 1, 2]), "dominant")
        with pytest.raises(CodingStateError):
            recode(G, "recessive")

    def test_fractional_rejected(self):
        values = np.full((4, 2), 0.5)
        G = GenotypeMatrix(values, list("abcd"), ["x", "y"])
        with pytest.raises(GenotypeValueError):
            recode(G, "dominant")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            recode(self.make([0, 1, 2]), "codominant")


class TestThresholds:
    @pytest.mark.parametrize("kwargs", [
        {"min_call_rate": 1.2},
        {"min_maf": 0.6},
        {"hwe_alpha": 0.0},
        {"hwe_alpha": 1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            QcThresholds(**kwargs)


class TestTables:
    def test_phenotype_and_alignment(self, tmp_path):
        path = write(tmp_path / "y.csv", "id,volume\nb,2.5\na,1.5\n")
        ids, y = load_phenotype(path)
        aligned = align_to_samples(["a", "b"], ids, y, what="phenotype")
        np.testing.assert_allclose(aligned, [1.5, 2.5])

    def test_phenotype_missing_sample(self, tmp_path):
        path = write(tmp_path / "y.csv", "id,volume\na,1.0\n")
        ids, y = load_phenotype(path)
        with pytest.raises(ValueError, match="missing samples"):
            align_to_samples(["a", "b"], ids, y)

    def test_covariates(self, tmp_path):
        path = write(tmp_path / "z.csv", "id,age,sex\na,50,0\nb,61,1\n")
        ids, Z, names = load_covariates(path)
        assert names == ["age", "sex"]
        np.testing.assert_allclose(Z, [[50, 0], [61, 1]])

    def test_covariates_ragged(self, tmp_path):
        path = write(tmp_path / "z.csv", "id,age\na,50\nb\n")
        with pytest.raises(GenotypeParseError, match="row 2"):
            load_covariates(path)
