"""Experiment harness: running RMSE, configuration handling and outputs."""

import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pgas.experiments import (
    DEFAULTS,
    OUTPUT_ROOT_ENV,
    ConfigError,
    ExperimentConfig,
    StreamingRmse,
    load_manifest,
    mean_horizon,
    output_directory,
    run_experiment,
    running_rmse,
)
from pgas.streams import stream


class TestRunningRmse:
    def test_hand_example(self):
        samples = np.array([[[1.0]], [[3.0]], [[2.0]]])
        series = running_rmse(samples, np.array([[2.0]]), burn_in=5)
        np.testing.assert_allclose(series.values, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(series.iterations(), [6, 7, 8])
        assert series.final == 0.0

    def test_averages_over_time_and_dimension(self):
        samples = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        assert running_rmse(samples, np.zeros((2, 2))).final == pytest.approx(0.5)

    def test_two_dimensional_input(self):
        series = running_rmse(np.ones((4, 3)), np.zeros(3))
        np.testing.assert_allclose(series.values, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            running_rmse(np.zeros((3, 4, 1)), np.zeros((5, 1)))
        with pytest.raises(ValueError):
            running_rmse(np.zeros((0, 4, 1)), np.zeros((4, 1)))

    @settings(max_examples=30, deadline=None)
    @given(data=arrays(float, (40, 5, 2), elements=st.floats(-100, 100)),
           cuts=st.lists(st.integers(1, 39), max_size=4, unique=True))
    def test_streaming_agrees_with_batch(self, data, cuts):
        exact = np.linspace(-1, 1, 10).reshape(5, 2)
        stream_rmse = StreamingRmse(exact)
        bounds = [0, *sorted(cuts), 40]
        for a, b in zip(bounds[:-1], bounds[1:]):
            stream_rmse.update(data[a:b])
        np.testing.assert_allclose(stream_rmse.series.values, running_rmse(data, exact).values,
                                   rtol=1e-12, atol=1e-12)

    def test_iid_error_decays_like_inverse_root(self):
        rng = stream(1)
        exact = np.zeros((10, 1))
        finals = [running_rmse(rng.standard_normal((n, 10, 1)), exact).final for n in (400, 6400)]
        assert finals[0] / finals[1] == pytest.approx(4.0, rel=0.35)


class TestConfig:
    def test_defaults_are_complete(self):
        for name, params in DEFAULTS.items():
            assert ExperimentConfig(name).resolved() == params

    @pytest.mark.parametrize("data", [
        {"experiment": "nope"},
        {"experiment": "rbps-lgssm", "seeds": []},
        {"experiment": "rbps-lgssm", "seeds": [-1]},
        {"experiment": "rbps-lgssm", "seeds": [True]},
        {"experiment": "rbps-lgssm", "params": {"bogus": 1}},
        {"experiment": "rbps-lgssm", "params": {"R": 10, "burn_in": 10}},
        {"experiment": "rbps-lgssm", "params": {"N": 2.5}},
        {"experiment": "rbps-lgssm", "params": {"truncation": {"mode": "fixed"}}},
        {"experiment": "rbps-lgssm", "params": {"kernels": ["ffbsi"]}},
        {"experiment": "random-systems", "params": {"orders": [2, 3], "outputs": [1]}},
        {"experiment": "random-systems", "params": {"orders": [3], "outputs": [1]}},
        {"experiment": "random-systems", "params": {"adaptive": {"tau": 2.0}}},
        {"experiment": "rbps-lgssm", "extra": 1},
        {"seeds": [1]},
    ])
    def test_invalid_configs(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_from_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"experiment": "prop1-bound", "seeds": [2]}')
        assert ExperimentConfig.from_json(path).seeds == [2]
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(path)

    def test_output_root_override(self, monkeypatch, tmp_path):
        cfg = ExperimentConfig("prop1-bound", output_dir="res")
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert output_directory(cfg) == tmp_path / "res"
        assert output_directory(cfg, root="/x") == type(tmp_path)("/x/res")

    def test_mean_horizon(self):
        assert mean_horizon(200) == 100.0
        assert np.isnan(mean_horizon(1))


def _tiny(experiment, tmp_path, **params):
    return ExperimentConfig(experiment, seeds=[1], params=params, output_dir=str(tmp_path / "out"))


TINY = {
    "rbps-lgssm": {"T": 20, "R": 30, "burn_in": 5},
    "random-systems": {"orders": [2, 5], "outputs": [1, 2], "systems_per_order": 1, "T": 20,
                       "R": 20, "burn_in": 5, "fixed_levels": {"2": [1, 2], "5": [1, 3]}},
    "ct-tracking": {"T": 10, "R": 20, "burn_in": 5,
                    "pmmh": {"N": 20, "R": 20, "burn_in": 5, "sigma": 0.2}},
    "prop1-bound": {"instances": 20, "M": 10},
}


class TestRuns:
    @pytest.mark.parametrize("experiment", sorted(TINY))
    def test_manifest_lists_every_file_with_hash(self, experiment, tmp_path):
        cfg = _tiny(experiment, tmp_path, **TINY[experiment])
        manifest = load_manifest(run_experiment(cfg))
        assert manifest["status"] == "complete"
        root = tmp_path / "out"
        listed = {e["path"] for e in manifest["files"]}
        on_disk = {str(p.relative_to(root)) for p in root.rglob("*")
                   if p.is_file() and p.name != "manifest.json"}
        assert listed == on_disk
        for entry in manifest["files"]:
            data = (root / entry["path"]).read_bytes()
            assert hashlib.sha256(data).hexdigest() == entry["sha256"]
            assert data.endswith(b"\n") and b"\r" not in data

    def test_rbps_outputs(self, tmp_path):
        cfg = _tiny("rbps-lgssm", tmp_path, **TINY["rbps-lgssm"])
        manifest = load_manifest(run_experiment(cfg))
        rows = (tmp_path / "out" / "rmse.csv").read_text().splitlines()
        assert rows[0] == "kernel,seed,iteration,rmse"
        assert len(rows) == 1 + 2 * 25
        assert set(manifest["summary"]["median_final_rmse"]) == {"pgas", "pgbs"}

    def test_random_systems_summary(self, tmp_path):
        cfg = _tiny("random-systems", tmp_path, **TINY["random-systems"])
        run_experiment(cfg)
        rows = (tmp_path / "out" / "summary.csv").read_text().splitlines()[1:]
        labels = [r.split(",")[4] for r in rows]
        assert labels == ["p=1", "p=2", "adaptive", "p=1", "p=3", "adaptive"]
        assert (tmp_path / "out" / "traces").is_dir()

    def test_same_seed_same_bytes(self, tmp_path):
        digests = []
        for run in range(2):
            cfg = _tiny("ct-tracking", tmp_path, **TINY["ct-tracking"])
            digests.append(json.dumps(load_manifest(run_experiment(cfg))["files"]))
        assert digests[0] == digests[1]

    def test_failure_writes_partial_manifest(self, tmp_path, monkeypatch):
        import pgas.experiments as ex

        def boom(config, out, summary):
            out.csv("half.csv", ["a"], [[1]])
            raise RuntimeError("disk on fire")

        monkeypatch.setitem(ex._RUNNERS, "prop1-bound", boom)
        cfg = _tiny("prop1-bound", tmp_path)
        with pytest.raises(RuntimeError):
            run_experiment(cfg)
        manifest = load_manifest(tmp_path / "out" / "manifest.json")
        assert manifest["status"] == "partial" and "disk on fire" in manifest["error"]
        assert [e["path"] for e in manifest["files"]] == ["half.csv"]
