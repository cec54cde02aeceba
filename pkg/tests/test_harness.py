"""Harness: slope fits, config round trips, reproducibility, CLI surface."""

import csv
import json
import os

import numpy as np
import pytest

from meanfield_sgd.cli import main as cli_main
from meanfield_sgd.harness import (
    ExperimentConfig,
    build_coefficients,
    exp_clt_rate,
    exp_commute,
    exp_lln_rate,
    exp_particle_rate,
    exp_sgd_compare,
    fit_slope,
    reference_config,
    sgd_trend_gate,
    w2_sq_to_uniform_1d,
)


class TestFitSlope:
    def test_exact_power_law(self):
        x = np.array([1.0, 2.0, 4.0, 8.0])
        fit = fit_slope(x, x**2)
        assert fit.slope == pytest.approx(2.0, abs=1e-9)

    def test_constant_series(self):
        x = np.array([1.0, 2.0, 4.0])
        fit = fit_slope(x, np.full(3, 5.0))
        assert fit.slope == pytest.approx(0.0, abs=1e-12)

    def test_noisy_linear_recovery(self):
        rng = np.random.default_rng(0)
        x = np.logspace(0, 2, 20)
        y = x * (1.0 + 0.1 * rng.normal(size=20))
        fit = fit_slope(x, y)
        assert fit.slope == pytest.approx(1.0, abs=0.1)

    def test_nonpositive_excluded_with_warning(self):
        x = np.array([1.0, 2.0, 4.0, 8.0])
        y = np.array([1.0, 4.0, 16.0, 0.0])
        with pytest.warns(UserWarning):
            fit = fit_slope(x, y)
        assert fit.slope == pytest.approx(2.0, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_slope([1.0, 2.0], [1.0, 2.0])

    def test_bootstrap_ci_brackets_the_slope(self):
        rng = np.random.default_rng(1)
        x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
        reps = x[None, :] ** 1.5 * (1.0 + 0.05 * rng.normal(size=(30, 5)))
        fit = fit_slope(x, reps)
        assert fit.ci_low is not None
        assert fit.ci_low <= fit.slope <= fit.ci_high
        assert fit.ci_low <= 1.5 <= fit.ci_high


class TestUniformQuantileOracle:
    def test_single_sample_at_midpoint(self):
        assert w2_sq_to_uniform_1d(np.array([0.5]), 0.0, 1.0) == pytest.approx(1 / 12)

    def test_against_dense_discretization(self):
        rng = np.random.default_rng(2)
        samples = rng.uniform(-1, 1, size=23)
        exact = w2_sq_to_uniform_1d(samples, -1.0, 1.0)
        # oracle: the uniform law as 200k equal atoms through the generic path
        from meanfield_sgd.measures import EmpiricalMeasure, w2

        grid = np.linspace(-1, 1, 200_001)
        mids = 0.5 * (grid[:-1] + grid[1:])
        dense = EmpiricalMeasure.uniform(mids[:, None])
        emp = EmpiricalMeasure.uniform(samples[:, None])
        approx = w2(emp, dense) ** 2
        assert exact == pytest.approx(approx, rel=1e-3, abs=1e-7)


class TestConfig:
    def test_json_round_trip(self):
        cfg = reference_config(replicas=12, base_seed=99)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_hash_sensitive_to_fields(self):
        a = reference_config()
        b = reference_config(base_seed=a.base_seed + 1)
        assert a.config_hash() != b.config_hash()

    def test_rate_validation(self):
        with pytest.raises(ValueError):
            reference_config(replicas=2).validate_for_rates()
        with pytest.raises(ValueError):
            reference_config(eps_grid=(0.1, -0.2)).validate_for_rates()

    def test_from_file(self, tmp_path):
        cfg = reference_config(replicas=11)
        path = tmp_path / "config.json"
        path.write_text(cfg.to_json())
        assert ExperimentConfig.from_file(path) == cfg


def tiny_lln_config(**overrides):
    base = dict(
        n_particles=20,
        eps_grid=(3e-2, 1e-2, 3e-3),
        dt=5e-3,
        horizon=0.25,
        snapshot_stride=10,
        replicas=10,
        base_seed=100,
    )
    base.update(overrides)
    return reference_config(**base)


class TestLlnExperiment:
    def test_reproducible_rows(self):
        cfg = tiny_lln_config()
        a = exp_lln_rate(cfg)
        b = exp_lln_rate(cfg)
        assert a.rows == b.rows

    def test_threads_do_not_change_results(self):
        cfg = tiny_lln_config()
        a = exp_lln_rate(cfg)
        b = exp_lln_rate(tiny_lln_config(threads=2))
        assert a.rows == b.rows

    def test_slope_near_one_even_at_small_scale(self):
        table = exp_lln_rate(tiny_lln_config())
        slope_rows = [s for s in table.summary if "slope" in s and s.get("metric") == "slope"]
        assert len(slope_rows) == 1
        assert abs(slope_rows[0]["slope"] - 1.0) < 0.35

    def test_degenerate_single_atom_reported(self):
        cfg = tiny_lln_config(dataset_rows=((0.5, 1.0, 0.3),), replicas=10)
        table = exp_lln_rate(cfg)
        assert all(r[4] < 1e-20 for r in table.rows)  # fp dust from the cancelled noise
        slope_rows = [s for s in table.summary if s.get("metric") == "slope"]
        assert slope_rows[0].get("degenerate", False)

    def test_dt_insensitivity_one_halving(self):
        """halving dt leaves the coupled sup W2^2 metric essentially unchanged
        (the fine run consumes the coarsened run's Brownian path)."""
        from meanfield_sgd.dynamics import (
            IntegratorConfig,
            NoisePath,
            sample_initial,
            simulate,
            simulate_transport,
        )
        from meanfield_sgd.harness import build_initial_spec
        from meanfield_sgd.measures import w2

        coeffs = build_coefficients(reference_config())
        spec = build_initial_spec(reference_config())
        ratios = []
        for seed in range(6):
            init = sample_initial(spec, 20, seed)
            fine_noise = NoisePath(seed, 2.5e-3, 100, coeffs.n_channels)
            sups = {}
            for dt, noise, stride in (
                (5e-3, fine_noise.coarsened(2), 10),
                (2.5e-3, fine_noise, 20),
            ):
                cfg = IntegratorConfig(dt=dt, horizon=0.25, eps=1e-2, snapshot_stride=stride)
                noisy = simulate(init, coeffs, cfg, noise)
                clean = simulate_transport(init, coeffs, cfg)
                sups[dt] = max(
                    w2(noisy.measure_at(s), clean.measure_at(s)) ** 2
                    for s in range(noisy.n_snapshots)
                )
            ratios.append(sups[2.5e-3] / sups[5e-3])
        assert 0.85 <= np.mean(ratios) <= 1.15

    def test_written_outputs(self, tmp_path):
        table = exp_lln_rate(tiny_lln_config())
        table.write(tmp_path)
        with open(tmp_path / "results.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            assert header == ["experiment", "param", "seed", "metric", "value"]
            rows = list(reader)
        assert len(rows) == len(table.rows)
        meta = json.loads((tmp_path / "run-meta.json").read_text())
        assert meta["config_hash"] == table.config_hash
        assert meta["code_version"] == table.code_version
        summary_text = (tmp_path / "summary.csv").read_text()
        assert "config_hash" in summary_text


class TestParticleRateExperiment:
    def test_small_scale_slope_and_amplification(self):
        cfg = ExperimentConfig(
            instance="synthetic-1d",
            mu0_kind="uniform",
            mu0_low=(-1.0,),
            mu0_high=(1.0,),
            m_grid=(25, 100, 400),
            dt=2e-3,
            horizon=0.25,
            snapshot_stride=25,
            replicas=40,
            base_seed=7,
        )
        table = exp_particle_rate(cfg)
        slope_rows = [s for s in table.summary if s.get("metric") == "slope_initial"]
        assert abs(slope_rows[0]["slope"] + 1.0) < 0.35
        amps = [s["mean"] for s in table.summary if s.get("metric") == "amplification"]
        assert max(amps) <= 3.0 * min(amps)


class TestCltExperiment:
    def test_small_scale_slope(self):
        cfg = reference_config(
            n_particles=30,
            eps_grid=(3e-2, 1e-2, 3e-3),
            dt=5e-3,
            horizon=0.25,
            clt_snapshot_stride=25,
            replicas=10,
            base_seed=11,
            k_max=32,
        )
        table = exp_clt_rate(cfg)
        slope_rows = [s for s in table.summary if s.get("metric") == "slope"]
        assert abs(slope_rows[0]["slope"] - 1.0) < 0.35
        assert slope_rows[0]["r_box"] > 0

    def test_fixed_box_skips_the_sizing_pass(self):
        cfg = reference_config(
            n_particles=10,
            eps_grid=(3e-2, 1e-2, 3e-3),
            dt=5e-3,
            horizon=0.1,
            clt_snapshot_stride=10,
            replicas=10,
            base_seed=12,
            k_max=32,
            r_box=4.0,
        )
        table = exp_clt_rate(cfg)
        slope_rows = [s for s in table.summary if s.get("metric") == "slope"]
        assert slope_rows[0]["r_box"] == 4.0


class TestSgdCompareExperiment:
    def test_small_scale_trend_gate(self):
        cfg = reference_config(
            m_grid=(20, 40),
            dt=5e-3,
            horizon=0.25,
            snapshot_stride=10,
            replicas=20,
            base_seed=13,
        )
        table = exp_sgd_compare(cfg)
        ok, intervals = sgd_trend_gate(table, "bump0", cfg.m_grid)
        assert len(intervals) == 1
        assert isinstance(ok, bool)
        g_rows = [s for s in table.summary if s.get("metric") == "g:bump0"]
        assert len(g_rows) == 2
        assert all(s["mean"] >= 0 for s in g_rows)

    def test_frozen_instance_gives_zero_gap(self):
        """f = 0 labels and zero output weights freeze both processes."""
        cfg = reference_config(
            dataset_rows=((-0.5, 0.5, 0.0), (0.5, 0.5, 0.0)),
            mu0_low=(0.0, -1.0),   # c = 0 exactly
            mu0_high=(0.0, 1.0),
            m_grid=(10, 20),
            dt=5e-3,
            horizon=0.1,
            snapshot_stride=10,
            replicas=10,
            base_seed=14,
        )
        table = exp_sgd_compare(cfg)
        for s in table.summary:
            if s.get("metric", "").startswith("g:"):
                assert s["mean"] == pytest.approx(0.0, abs=1e-12)


class TestCommuteExperiment:
    def test_square_shrinks_toward_the_corner(self):
        cfg = ExperimentConfig(
            instance="synthetic-1d",
            synthetic_params=(("kappa", 0.5), ("gamma", 0.5), ("g_amp", 1.5), ("g_freq", 1.0)),
            mu0_kind="uniform",
            mu0_low=(-1.0,),
            mu0_high=(1.0,),
            m_grid=(12, 50, 200),
            alpha_grid=(0.08, 0.02, 0.005),
            dt=2e-3,
            horizon=0.25,
            snapshot_stride=25,
            replicas=20,
            base_seed=15,
        )
        table = exp_commute(cfg)
        means = {
            s["param"]: s["mean"]
            for s in table.summary
            if s.get("metric") == "sup_w2_sq"
        }
        corner = means["200:0.005"]
        assert corner == min(means.values())
        fit_rows = [s for s in table.summary if s.get("metric") == "surface_fit"]
        assert fit_rows[0]["rel_residual"] < 0.30
        assert fit_rows[0]["c_alpha"] > 0
        assert fit_rows[0]["c_inv_m"] > 0
        # the two iterated-limit endpoints land close to each other
        e_a = fit_rows[0]["endpoint_alpha_then_m"]
        e_b = fit_rows[0]["endpoint_m_then_alpha"]
        scale = fit_rows[0]["c_alpha"] * 0.005 + fit_rows[0]["c_inv_m"] / 200
        assert abs(e_a - e_b) <= 3.0 * scale


class TestCli:
    def write_cfg(self, tmp_path, **overrides):
        cfg = reference_config(
            n_particles=15,
            eps_grid=(3e-2, 1e-2, 3e-3),
            dt=5e-3,
            horizon=0.1,
            snapshot_stride=5,
            replicas=10,
            base_seed=21,
            **overrides,
        )
        path = tmp_path / "config.json"
        path.write_text(cfg.to_json())
        return path

    def test_simulate_writes_trajectory(self, tmp_path):
        cfg_path = self.write_cfg(tmp_path)
        out = tmp_path / "out"
        rc = cli_main(["simulate", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        text = (out / "trajectory.txt").read_text().splitlines()
        assert text[0].startswith("# noise seed=")
        assert (out / "run-meta.json").exists()

    def test_sgd_writes_chain(self, tmp_path):
        cfg_path = self.write_cfg(tmp_path)
        out = tmp_path / "out"
        assert cli_main(["sgd", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "sgd-chain.txt").exists()

    def test_lln_rate_outputs(self, tmp_path, capsys):
        cfg_path = self.write_cfg(tmp_path)
        out = tmp_path / "res"
        rc = cli_main([
            "lln-rate", "--config", str(cfg_path), "--out", str(out), "--replicas", "10",
        ])
        assert rc == 0
        assert (out / "results.csv").exists()
        assert (out / "summary.csv").exists()
        assert "slope" in capsys.readouterr().out

    def test_diagnose_report(self, tmp_path):
        cfg_path = self.write_cfg(tmp_path)
        out = tmp_path / "diag"
        assert cli_main(["diagnose", "--config", str(cfg_path), "--out", str(out)]) == 0
        lines = (out / "diagnostics.txt").read_text().splitlines()
        assert lines[0] == "phi seed metric value"
        assert any("weak_residual" in line for line in lines)
        from meanfield_sgd.measures import read_field

        field = read_field(out / "field-final.txt")
        assert field.kind == "atomic"
        assert abs(field.payload.sum()) < 1e-12

    def test_seed_override_changes_hash(self, tmp_path):
        cfg_path = self.write_cfg(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        cli_main(["simulate", "--config", str(cfg_path), "--out", str(out_a)])
        cli_main(["simulate", "--config", str(cfg_path), "--out", str(out_b), "--seed", "555"])
        meta_a = json.loads((out_a / "run-meta.json").read_text())
        meta_b = json.loads((out_b / "run-meta.json").read_text())
        assert meta_a["config_hash"] != meta_b["config_hash"]

    def test_remaining_experiment_subcommands(self, tmp_path):
        """clt-rate, particle-rate, sgd-compare and commute all produce the
        standard output triple through the CLI."""
        clt_cfg = reference_config(
            n_particles=10, eps_grid=(3e-2, 1e-2, 3e-3), dt=5e-3, horizon=0.1,
            clt_snapshot_stride=10, replicas=10, base_seed=30, k_max=32, r_box=4.0,
        )
        syn_cfg = ExperimentConfig(
            instance="synthetic-1d", mu0_kind="uniform", mu0_low=(-1.0,), mu0_high=(1.0,),
            m_grid=(10, 20, 40), alpha_grid=(0.05, 0.01), dt=5e-3, horizon=0.1,
            snapshot_stride=10, replicas=10, base_seed=31,
        )
        sgd_cfg = reference_config(
            m_grid=(10, 20), dt=5e-3, horizon=0.1, snapshot_stride=10,
            replicas=10, base_seed=32,
        )
        for name, cfg in (("clt-rate", clt_cfg), ("particle-rate", syn_cfg),
                          ("commute", syn_cfg), ("sgd-compare", sgd_cfg)):
            cfg_path = tmp_path / f"{name}.json"
            cfg_path.write_text(cfg.to_json())
            out = tmp_path / name
            rc = cli_main([name, "--config", str(cfg_path), "--out", str(out)])
            assert rc == 0
            assert (out / "results.csv").exists()
            assert (out / "summary.csv").exists()
            assert (out / "run-meta.json").exists()


class TestFailureRecording:
    @pytest.mark.filterwarnings("ignore")
    def test_diverging_cells_are_recorded_not_fatal(self):
        """an exploding synthetic drift turns cells into recorded failures."""
        cfg = ExperimentConfig(
            instance="synthetic-1d",
            synthetic_params=(("kappa", -1e6), ("gamma", 0.0), ("g_amp", 0.1), ("g_freq", 1.0)),
            mu0_kind="uniform", mu0_low=(-1.0,), mu0_high=(1.0,),
            n_particles=5,
            eps_grid=(3e-2, 1e-2, 3e-3),
            dt=5e-3, horizon=0.5, snapshot_stride=20,
            replicas=10, base_seed=40,
        )
        table = exp_lln_rate(cfg)
        failed = [r for r in table.rows if r[3] == "failed"]
        assert failed, "expected recorded failure rows"
        slope_rows = [s for s in table.summary if s.get("metric") == "slope"]
        assert slope_rows and np.isnan(slope_rows[0]["slope"])
