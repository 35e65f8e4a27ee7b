import numpy as np
import pytest

from imtscast.data import DataError, align
from imtscast.datasets import (
    PRESETS,
    SynthSpec,
    assemble_samples,
    generate,
    read_dataset,
    read_observations,
    read_queries,
    split_counts,
    split_samples,
    write_dataset,
)


class TestGeneration:
    def test_noiseless_known_signal_evaluates_exactly(self):
        spec = SynthSpec(n_variates=1, n_samples=3, noise_std=0.0, n_components=1,
                         amplitude_range=(1.0, 1.0), frequency_range=(1.0, 1.0),
                         phase_range=(0.0, 0.0), window=1.0, mean_observations=25.0,
                         queries_per_variate=3, seed=5)
        for sample in generate(spec):
            series = sample.series[0]
            assert np.array_equal(series.values, np.sin(2 * np.pi * series.times))
            assert np.array_equal(sample.query_targets[0],
                                  np.sin(2 * np.pi * sample.query_times[0]))

    def test_independent_mode_timestamps_never_fully_overlap(self):
        spec = SynthSpec(n_variates=2, n_samples=20, mean_observations=10.0, seed=6)
        for sample in generate(spec):
            lengths = [len(s) for s in sample.series]
            union = len(set().union(*[set(s.times.tolist()) for s in sample.series]))
            assert union == sum(lengths)  # continuous draws collide with prob. zero
            assert align(sample).grid_length == union

    def test_shared_mode_aligns_all_variates(self):
        spec = SynthSpec(n_variates=3, n_samples=5, mode="shared",
                         mean_observations=8.0, seed=7)
        for sample in generate(spec):
            triplet = align(sample)
            assert np.all(triplet.mask == 1.0)

    def test_mixed_mode_shares_even_variates(self):
        spec = SynthSpec(n_variates=4, n_samples=3, mode="mixed",
                         mean_observations=8.0, seed=8)
        for sample in generate(spec):
            assert np.array_equal(sample.series[0].times, sample.series[2].times)

    def test_queries_beyond_last_observation(self):
        spec = SynthSpec(n_variates=3, n_samples=10, mean_observations=12.0, seed=9)
        for sample in generate(spec):
            for series, queries in zip(sample.series, sample.query_times):
                if len(series) and queries.size:
                    assert queries.min() > series.times.max()

    def test_same_seed_is_reproducible(self):
        spec = SynthSpec(n_variates=2, n_samples=4, seed=10)
        a, b = generate(spec), generate(spec)
        for s1, s2 in zip(a, b):
            for r1, r2 in zip(s1.series, s2.series):
                assert np.array_equal(r1.times, r2.times)
                assert np.array_equal(r1.values, r2.values)

    def test_observation_counts_track_intensity(self):
        spec = SynthSpec(n_variates=1, n_samples=400, mean_observations=15.0, seed=11,
                         queries_per_variate=0)
        counts = [len(s.series[0]) for s in generate(spec)]
        # Poisson(15) mean over 400 draws: 3 sigma is ~0.58
        assert abs(np.mean(counts) - 15.0) < 3 * np.sqrt(15.0 / 400)

    def test_signal_families_produce_finite_values(self):
        for signal in ("sinusoid", "damped", "trend"):
            spec = SynthSpec(n_variates=2, n_samples=2, signal=signal, seed=12)
            for sample in generate(spec):
                for series in sample.series:
                    assert np.isfinite(series.values).all()

    def test_invalid_specs_rejected(self):
        with pytest.raises(DataError, match="n_variates"):
            SynthSpec(n_variates=0).validate()
        with pytest.raises(DataError, match="horizon"):
            SynthSpec(horizon_frac=1.5).validate()
        with pytest.raises(DataError, match="intensity"):
            SynthSpec(mean_observations=0).validate()
        with pytest.raises(DataError, match="split"):
            SynthSpec(n_samples=10, split=(5, 3, 5)).validate()


class TestSplits:
    def test_default_fractions(self):
        assert split_counts(SynthSpec(n_samples=100)) == (60, 20, 20)
        assert split_counts(SynthSpec(n_samples=800)) == (480, 160, 160)

    def test_explicit_counts_override(self):
        assert split_counts(PRESETS["sinusoid-a"]) == (500, 150, 150)

    def test_no_sample_in_two_splits(self):
        spec = SynthSpec(n_variates=2, n_samples=25, seed=13)
        splits = split_samples(generate(spec), spec)
        ids = [s.sample_id for name in ("train", "val", "test") for s in splits[name]]
        assert len(ids) == len(set(ids)) == 25

    def test_membership_determined_by_seed_and_count(self):
        spec = SynthSpec(n_variates=2, n_samples=25, seed=14)
        a = split_samples(generate(spec), spec)
        b = split_samples(generate(spec), spec)
        assert [s.sample_id for s in a["val"]] == [s.sample_id for s in b["val"]]


class TestFileRoundTrip:
    def test_round_trip_reproduces_samples(self, tmp_path):
        spec = SynthSpec(n_variates=3, n_samples=100, mean_observations=6.0, seed=15)
        manifest = write_dataset(spec, tmp_path)
        loaded = read_dataset(manifest)
        originals = split_samples(generate(spec), spec)
        for name in ("train", "val", "test"):
            assert len(loaded[name]) == len(originals[name])
            for got, want in zip(loaded[name], originals[name]):
                assert got.sample_id == want.sample_id
                for g, w in zip(got.series, want.series):
                    assert np.array_equal(g.times, w.times)
                    assert np.array_equal(g.values, w.values)
                for g, w in zip(got.query_times, want.query_times):
                    assert np.array_equal(g, w)
                for g, w in zip(got.query_targets, want.query_targets):
                    assert np.array_equal(g, w)

    def test_same_seed_gives_identical_bytes(self, tmp_path):
        spec = SynthSpec(n_variates=2, n_samples=6, seed=16)
        m1 = write_dataset(spec, tmp_path / "a")
        m2 = write_dataset(spec, tmp_path / "b")
        for name in ("train_obs.csv", "train_queries.csv", "test_obs.csv"):
            assert (m1.parent / name).read_bytes() == (m2.parent / name).read_bytes()

    def test_non_increasing_times_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text(
            "series_id,variate,time,value\n"
            "0,1,1.0,0.5\n"
            "0,1,1.0,0.7\n",
            encoding="utf-8",
        )
        with pytest.raises(DataError, match="obs.csv:3"):
            read_observations(path)

    def test_malformed_row_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text(
            "series_id,variate,time,value\n0,1,abc,0.5\n", encoding="utf-8"
        )
        with pytest.raises(DataError, match="obs.csv:2"):
            read_observations(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("a,b,c,d\n", encoding="utf-8")
        with pytest.raises(DataError, match="header"):
            read_observations(path)

    def test_empty_query_file_is_accepted(self, tmp_path):
        path = tmp_path / "q.csv"
        path.write_text("series_id,variate,time,target\n", encoding="utf-8")
        assert read_queries(path, require_targets=True) == {}

    def test_checksum_mismatch_detected(self, tmp_path):
        spec = SynthSpec(n_variates=2, n_samples=5, seed=17)
        manifest = write_dataset(spec, tmp_path)
        target = tmp_path / "val_obs.csv"
        target.write_text(target.read_text() + "# tampered\n")
        with pytest.raises(DataError, match="checksum"):
            read_dataset(manifest)

    def test_query_only_variate_becomes_empty_stream(self, tmp_path):
        obs = tmp_path / "obs.csv"
        obs.write_text("series_id,variate,time,value\n0,1,1.0,0.5\n", encoding="utf-8")
        q = tmp_path / "q.csv"
        q.write_text("series_id,variate,time,target\n0,2,5.0,1.0\n", encoding="utf-8")
        samples = assemble_samples(read_observations(obs), read_queries(q, True))
        assert samples[0].n_variates == 2
        assert len(samples[0].series[1]) == 0
        assert samples[0].query_times[1].tolist() == [5.0]
