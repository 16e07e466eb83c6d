"""Benchmark harness tests: generators, statistics, trials, and the launcher."""

import json
import math

import numpy as np
import pytest

from punchgrid.bench import (
    ExperimentConfig,
    ScalingRow,
    TimingRecord,
    TrialFailed,
    _clear_job_natsim,
    _natsim_cluster,
    aggregate,
    emit,
    generate_tables,
    launch,
    run_trial_natsim,
    speedup,
    speedup_table,
    splitmix64,
)
from punchgrid.errors import DivideByZero, NoData

from oracles import indexed_nested_loop_join, splitmix64_reference


# Frozen from the canonical C reference implementation (see oracles.py for
# the pure-python mirror used in the property check).
SPLITMIX_VECTORS = {
    0: 0xC329812D1D820396,
    1: 0x63980F70723F9FD0,
    0xDEADBEEF: 0x2EAA32749A187E48,
    1234567: 8067408807706546300,
}


def test_splitmix64_frozen_vectors():
    for x, expected in SPLITMIX_VECTORS.items():
        assert splitmix64(x) == expected


def test_splitmix64_matches_reference():
    rng = np.random.default_rng(1)
    for x in rng.integers(0, 1 << 63, size=200):
        assert splitmix64(int(x)) == splitmix64_reference(int(x))


def test_generate_tables_deterministic_per_seed_and_rank():
    a_left, a_right = generate_tables(1000, 0.5, seed=7, rank=3, world_size=4)
    b_left, b_right = generate_tables(1000, 0.5, seed=7, rank=3, world_size=4)
    assert a_left == b_left and a_right == b_right
    c_left, _ = generate_tables(1000, 0.5, seed=7, rank=2, world_size=4)
    assert not (a_left == c_left)


def test_generate_tables_key_domain():
    rows, u, w = 5000, 0.25, 4
    left, right = generate_tables(rows, u, seed=1, rank=0, world_size=w)
    domain = math.ceil(u * rows * w)
    for part in (left, right):
        keys = part.columns[0]
        assert keys.min() >= 0
        assert keys.max() < domain
        assert part.num_rows == rows


def test_duplicate_rate_matches_birthday_statistics():
    rows = 1_000_000
    left, _ = generate_tables(rows, 1.0, seed=9, rank=0, world_size=1)
    domain = rows  # u=1, W=1
    distinct = len(np.unique(left.columns[0]))
    expected_distinct = domain * (1 - (1 - 1 / domain) ** rows)
    duplicates = rows - distinct
    expected_duplicates = rows - expected_distinct
    assert duplicates == pytest.approx(expected_duplicates, rel=0.05)


def test_lower_unique_fraction_inflates_join():
    def join_count(u):
        left, right = generate_tables(2000, u, seed=5, rank=0, world_size=1)
        return len(indexed_nested_loop_join(left.rows(), right.rows(), 0))

    dense = join_count(0.01)
    sparse = join_count(1.0)
    assert dense > 10 * max(sparse, 1)


# --- speedup & error propagation ---

def test_speedup_published_strong_scaling_point():
    # EC2 4 vCPU strong: W=1 vs W=16 from the experiment tables
    s = speedup(ScalingRow(1, 16.28, 0.45), ScalingRow(16, 1.37, 0.01))
    assert s.speedup == pytest.approx(16.28 / 1.37, abs=1e-12)
    assert s.speedup == pytest.approx(11.88, abs=0.005)


def test_speedup_error_propagation_hand_computed():
    # Lambda 10 GB strong: W=1 vs W=16
    s = speedup(ScalingRow(1, 17.76, 0.26), ScalingRow(16, 1.30, 0.03))
    assert s.speedup == pytest.approx(13.6615384615, abs=1e-6)
    expected_err = 13.661538461538461 * math.sqrt((0.26 / 17.76) ** 2 + (0.03 / 1.30) ** 2)
    assert s.err == pytest.approx(expected_err, rel=1e-12)
    assert s.err == pytest.approx(0.37, abs=0.01)


def test_speedup_identical_rows_gives_one_with_sqrt2_error():
    s = speedup(ScalingRow(1, 10.0, 0.5), ScalingRow(1, 10.0, 0.5))
    assert s.speedup == 1.0
    assert s.err == pytest.approx(math.sqrt(2) * 0.5 / 10.0, rel=1e-12)


def test_speedup_zero_time_rejected():
    with pytest.raises(DivideByZero):
        speedup(ScalingRow(1, 10.0, 0.1), ScalingRow(2, 0.0, 0.0))
    with pytest.raises(DivideByZero):
        speedup(ScalingRow(1, 0.0, 0.0), ScalingRow(2, 1.0, 0.0))


def _records_for_trial_means(w, means_s):
    return [
        TimingRecord(w, trial, 0, mean * 1000.0, 0.0, 0.0)
        for trial, mean in enumerate(means_s)
    ]


def test_aggregate_zero_variance():
    rows = aggregate(_records_for_trial_means(2, [10, 10, 10, 10]), [2])
    assert rows == [ScalingRow(2, 10.0, 0.0)]


def test_aggregate_sample_std_uses_n_minus_one():
    (row,) = aggregate(_records_for_trial_means(4, [9, 10, 11, 10]), [4])
    assert row.mean_s == pytest.approx(10.0)
    assert row.std_s == pytest.approx(0.8164965809, abs=1e-9)


def test_aggregate_missing_world_size_raises():
    with pytest.raises(NoData) as err:
        aggregate(_records_for_trial_means(2, [1.0]), [2, 8])
    assert "8" in str(err.value)


def test_aggregate_averages_iterations_within_trial():
    records = [
        TimingRecord(2, 0, 0, 1000.0, 0.0, 0.0),
        TimingRecord(2, 0, 1, 3000.0, 0.0, 0.0),
    ]
    (row,) = aggregate(records, [2])
    assert row.mean_s == pytest.approx(2.0)
    assert row.std_s == 0.0


def test_emit_formats(tmp_path):
    scaling = [ScalingRow(1, 2.0, 0.1), ScalingRow(4, 0.5, 0.05)]
    speedups = speedup_table(scaling)
    emit(scaling, speedups, "csv", tmp_path / "results.csv", "strong")
    emit(scaling, speedups, "plotdat", tmp_path / "speedup.dat", "strong")
    csv_lines = (tmp_path / "results.csv").read_text().splitlines()
    assert csv_lines[0] == "mode,W,mean_s,std_s,speedup,speedup_err"
    assert csv_lines[1].startswith("strong,1,2.000000,0.100000,1.000000,")
    assert csv_lines[2].startswith("strong,4,0.500000,0.050000,4.000000,")
    dat_lines = (tmp_path / "speedup.dat").read_text().splitlines()
    assert dat_lines[0].startswith("#")
    assert dat_lines[1].split()[:2] == ["1", "1.000000"]
    with pytest.raises(ValueError):
        emit(scaling, speedups, "xml", tmp_path / "nope", "strong")


# --- trials over natsim ---

def _small_config(**kw):
    defaults = dict(
        mode="weak",
        rows=2000,
        world_sizes=(1, 2),
        iterations=2,
        repeats=2,
        unique_fraction=1.0,
        seed=13,
        transport="natsim",
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_run_trial_returns_record_per_iteration_and_matches_oracle():
    config = _small_config(world_sizes=(1,), rows=10_000, iterations=3, repeats=1)
    cluster, control_env = _natsim_cluster(config, 1)
    _clear_job_natsim(cluster[0], control_env, cluster[1], "bench-w1")
    result = run_trial_natsim(config, 1, 0, "bench-w1", cluster)
    assert len(result["records"]) == 3
    left, right = generate_tables(10_000, 1.0, 13, rank=0, world_size=1)
    expected = len(indexed_nested_loop_join(left.rows(), right.rows(), 0))
    assert result["join_rows_per_iteration"] == [expected] * 3


def test_identical_natsim_trials_have_identical_join_sizes():
    config = _small_config(world_sizes=(2,), repeats=1)
    sizes = []
    for _ in range(2):
        cluster, control_env = _natsim_cluster(config, 2)
        _clear_job_natsim(cluster[0], control_env, cluster[1], "bench-w2")
        result = run_trial_natsim(config, 2, 0, "bench-w2", cluster)
        sizes.append(result["join_rows_per_iteration"])
    assert sizes[0] == sizes[1]


def test_repeats_without_clearing_fail_rank_assignment():
    config = _small_config(world_sizes=(2,), repeats=2)
    cluster, control_env = _natsim_cluster(config, 2)
    job = "bench-w2"
    _clear_job_natsim(cluster[0], control_env, cluster[1], job)
    run_trial_natsim(config, 2, 0, job, cluster)
    # second repeat without clear_job: the counter resumes past world_size
    with pytest.raises(TrialFailed) as err:
        run_trial_natsim(config, 2, 1, job, cluster)
    assert "WorldFull" in repr(err.value)
    # clearing restores determinism
    _clear_job_natsim(cluster[0], control_env, cluster[1], job)
    result = run_trial_natsim(config, 2, 2, job, cluster)
    assert len(result["records"]) == config.iterations


def test_natsim_launch_end_to_end(tmp_path):
    config = _small_config(out_dir=tmp_path)
    assert launch(config) == 0
    csv_lines = (tmp_path / "results.csv").read_text().splitlines()
    assert csv_lines[0] == "mode,W,mean_s,std_s,speedup,speedup_err"
    assert len(csv_lines) == 3  # two world sizes
    first = csv_lines[1].split(",")
    assert first[1] == "1"
    assert float(first[4]) == 1.0  # speedup at the baseline W is exactly 1
    metadata = json.loads((tmp_path / "run-metadata.json").read_text())
    assert metadata["trial_time_reduction"] == "max_over_ranks"
    assert metadata["status"] == 0
    assert (tmp_path / "speedup.dat").exists()


def test_single_world_size_has_unit_speedup(tmp_path):
    config = _small_config(world_sizes=(1,), repeats=1, out_dir=tmp_path)
    assert launch(config) == 0
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert len(lines) == 2
    assert float(lines[1].split(",")[4]) == 1.0


def test_natsim_launch_is_exactly_reproducible(tmp_path):
    # virtual clock: not just the shapes, the whole CSV is byte-identical
    a = _small_config(out_dir=tmp_path / "a")
    b = _small_config(out_dir=tmp_path / "b")
    assert launch(a) == 0 and launch(b) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (
        tmp_path / "b" / "results.csv"
    ).read_bytes()


def test_weak_scaling_virtual_times_non_decreasing(tmp_path):
    config = _small_config(world_sizes=(1, 2, 4), rows=1000, out_dir=tmp_path)
    assert launch(config) == 0
    lines = (tmp_path / "results.csv").read_text().splitlines()[1:]
    means = [float(line.split(",")[2]) for line in lines]
    assert means == sorted(means)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(mode="diagonal")
    with pytest.raises(ValueError):
        ExperimentConfig(mode="strong", rows=2, world_sizes=(4,))
    with pytest.raises(ValueError):
        ExperimentConfig(unique_fraction=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(repeats=0)
