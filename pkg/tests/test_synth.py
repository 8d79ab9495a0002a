import math

import numpy as np
import pytest

from ecgliver.ingest import load_cohort
from ecgliver.schema import CANONICAL_CODES, DEFAULT_SCHEMA
from ecgliver.synth import (
    SynthSpec,
    TargetModel,
    default_spec,
    external_spec,
    generate,
    generate_arrays,
    oracle_bayes_auroc,
    solve_intercepts,
)

# median (IQR) per feature, cohort summary table: MIMIC-IV-ECG and ECG-View II
SUMMARY_INTERNAL = {
    "rr_interval": (769, 264), "pr_interval": (158, 38), "qrs_duration": (94, 23), "qt_interval": (394, 68),
    "qtc_interval": (447, 47), "p_axis": (51, 32), "qrs_axis": (13, 61), "t_axis": (42, 58), "age": (66, 25),
}
SUMMARY_EXTERNAL = {
    "rr_interval": (857, 227), "pr_interval": (158, 28), "qrs_duration": (90, 14), "qt_interval": (392, 48),
    "qtc_interval": (421, 37), "p_axis": (53, 28), "qrs_axis": (48, 49), "t_axis": (44, 33), "age": (52, 25),
}


def test_presets_match_cohort_summaries():
    for spec, table in ((default_spec(), SUMMARY_INTERNAL), (external_spec(), SUMMARY_EXTERNAL)):
        assert {k: (m.median, m.iqr) for k, m in spec.marginals.items()} == table
    assert default_spec().male_ratio == pytest.approx(0.5149, abs=1e-4)
    assert external_spec().male_ratio == pytest.approx(0.5155, abs=1e-4)
    prev = [t.prevalence for t in default_spec().targets]
    assert max(prev) == 0.0221 and min(prev) == 0.0067
    prev = [t.prevalence for t in external_spec().targets]
    assert max(prev) == 0.0067 and min(prev) == 0.0003


@pytest.fixture(scope="module")
def draw100k():
    return generate_arrays(default_spec(n_samples=100_000, seed=0))


def test_rr_interval_calibration(draw100k):
    rr = draw100k.X[:, DEFAULT_SCHEMA.index("rr_interval")]
    q1, med, q3 = np.nanpercentile(rr, [25, 50, 75])
    assert abs(med / 769 - 1) <= 0.02
    assert abs((q3 - q1) / 264 - 1) <= 0.05


def test_sex_ratio_and_missingness(draw100k):
    sex = draw100k.X[:, DEFAULT_SCHEMA.index("sex")]
    assert set(np.unique(sex)) == {0.0, 1.0}
    assert abs(sex.mean() - 0.5149) < 0.01
    miss = np.isnan(draw100k.X).mean(axis=0)
    for j, name in enumerate(DEFAULT_SCHEMA.names):
        if name in ("pr_interval", "p_axis"):
            assert 0.015 < miss[j] < 0.025
        else:
            assert miss[j] == 0.0


def test_prevalence_and_hierarchy(draw100k):
    L = draw100k.labels
    for j, t in enumerate(default_spec().targets):
        p = t.prevalence
        se = math.sqrt(p * (1 - p) / len(L))
        assert abs(L[:, j].mean() - p) <= 4 * se
    for child, parent in [(2, 1), (1, 0), (5, 4), (4, 3)]:
        assert np.all(L[:, child] <= L[:, parent])


def test_zero_coefficients_prevalence():
    spec = default_spec(n_samples=50_000, seed=3,
                        targets=[TargetModel("K70", 0.3), TargetModel("K72", 0.1, intercept=-1.5)])
    b = solve_intercepts(spec)
    assert 1 / (1 + math.exp(-b["K70"])) == pytest.approx(0.3, rel=1e-9)
    L = generate_arrays(spec).labels
    for j, code in enumerate(["K70", "K72"]):
        p = 1 / (1 + math.exp(-b[code]))
        se = math.sqrt(p * (1 - p) / len(L))
        assert abs(L[:, j].mean() - p) <= 3 * se


def test_infeasible_hierarchy():
    with pytest.raises(ValueError, match="infeasible"):
        default_spec(targets=[TargetModel("K70", 0.01), TargetModel("K703", 0.02)])
    with pytest.raises(ValueError):
        default_spec(missingness={"age": 0.1})
    with pytest.raises(ValueError):
        default_spec(missingness={"pr_interval": 1.0})


def test_deterministic_and_block_schedule_invariant():
    spec = default_spec(n_samples=5000, seed=9, block_size=1024)
    a, b = generate_arrays(spec), generate_arrays(spec)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.labels, b.labels)
    # block k depends only on (seed, k): a shorter cohort is a prefix of a longer one
    head = generate_arrays(default_spec(n_samples=2048, seed=9, block_size=1024))
    assert head.X.tobytes() == a.X[:2048].tobytes()
    np.testing.assert_array_equal(head.labels, a.labels[:2048])
    c = generate_arrays(default_spec(n_samples=5000, seed=10, block_size=1024))
    assert not np.array_equal(a.labels, c.labels) or not np.array_equal(a.X, c.X)


def test_oracle_examples():
    spec = default_spec()
    null = default_spec(targets=[TargetModel("K70", 0.2)])
    assert abs(oracle_bayes_auroc(null, 20_000) - 0.5) < 0.03
    extreme = default_spec(targets=[TargetModel("K70", 0.2, {"qtc_interval": 20.0})])
    assert oracle_bayes_auroc(extreme, 20_000) >= 0.99
    v = oracle_bayes_auroc(spec, 200_000)
    assert abs(v - 0.85) <= 0.02
    for code in CANONICAL_CODES:
        assert abs(oracle_bayes_auroc(spec, 200_000, target=code) - 0.85) <= 0.02


def test_oracle_degenerate_draw_raises():
    spec = default_spec(targets=[TargetModel("K70", 1e-9, intercept=-60.0)])
    with pytest.raises(ValueError, match="degenerate"):
        oracle_bayes_auroc(spec, 100)


def test_file_output_matches_arrays(tmp_path):
    for make in (default_spec, external_spec):
        spec = make(n_samples=3000, seed=4)
        draw = generate_arrays(spec)
        generate(spec, tmp_path / "c.csv")
        cohort = load_cohort(tmp_path / "c.csv", CANONICAL_CODES)
        assert len(cohort) == 3000 and cohort.meta["rejected"] == 0
        assert cohort.X.tobytes() == draw.X.tobytes()
        np.testing.assert_array_equal(cohort.labels, draw.labels)
        assert cohort.hierarchy_violations() == 0


def test_spec_roundtrip(tmp_path):
    spec = external_spec(n_samples=123, seed=77)
    spec.save(tmp_path / "s.json")
    assert SynthSpec.load(tmp_path / "s.json") == spec
