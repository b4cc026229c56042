"""Orchestration-layer checks at tiny scale: file formats, config layering,
determinism wiring, and command behavior.  Training quality at the real desk
scale lives in test_acceptance.py."""

import math
from dataclasses import replace

import numpy as np
import pytest

from qpgd import capacitor as cap
from qpgd import cli
from qpgd import harness as h
from qpgd.autodiff import AnalyticField, ConfigurationError, MlpSpec, init_params, param_count
from qpgd.optimizer import QpgdConfig, alpha as alpha_of


def tiny_config(**over):
    base = dict(
        hidden_widths=(6, 5),
        epochs=30,
        n_pde=40,
        n_bc0=16,
        n_bcv=8,
        pretrain_cap=10,
        grid_resolution=40,
    )
    base.update(over)
    return h.desk_config(**base)


@pytest.fixture(scope="module")
def tiny_truth(tmp_path_factory):
    out = tmp_path_factory.mktemp("truth")
    cfg = tiny_config(mode="truth", seed=0, epochs=60, out_dir=str(out))
    art = h.cmd_truth(cfg)
    return art


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_config(mode="qpgd", seed=3, c=10.0, alpha_clip=2.0, p=math.inf)
        back = h.config_from_text(h.config_to_text(cfg))
        assert back == cfg

    def test_digest_changes_with_content(self):
        a = h.config_digest(tiny_config(seed=1))
        b = h.config_digest(tiny_config(seed=2))
        assert a != b and len(a) == 12

    def test_presets(self):
        desk = h.desk_config()
        full = h.full_config()
        assert desk.hidden_widths == (32, 32, 32) and desk.epochs == 4000
        assert desk.n_pde == 2000 and desk.n_bc0 == 100 and desk.n_bcv == 50
        assert full.hidden_widths == (64, 64, 64, 64) and full.epochs == 40_000
        assert full.n_pde == 20_000 and full.n_bc0 == 300 and full.n_bcv == 100
        assert full.halving_interval == 6667
        for cfg in (desk, full):
            assert (cfg.gamma0, cfg.z, cfg.delta, cfg.p) == (4e-3, 1.0, 0.1, 2.0)

    def test_layering_file_over_preset(self, tmp_path):
        path = tmp_path / "override.ini"
        path.write_text("[run]\nepochs = 123\n")
        cfg = h.load_config(path, base=h.full_config())
        assert cfg.epochs == 123
        assert cfg.hidden_widths == (64, 64, 64, 64)  # preset survives

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            h.config_from_text("[run]\nbogus = 1\n")

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            h.RunConfig(mode="wat")

    def test_seed_derivation_stable(self):
        a = h.derive_seeds(7)
        b = h.derive_seeds(7)
        c = h.derive_seeds(8)
        assert a == b
        assert set(a) == {"init", "interior", "boundary", "meas_points", "noise"}
        assert a != c


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        spec = MlpSpec(2, (4, 3), 1)
        params = init_params(spec, 5) + 1e-17  # exercise full precision
        params[-1] = 0.123456789012345678
        path = tmp_path / "ck.txt"
        h.save_checkpoint(path, params, spec, "cafe01234567", 5)
        back, spec2, header = h.load_checkpoint(path)
        assert np.array_equal(back, params)
        assert spec2 == spec
        assert header["digest"] == "cafe01234567"
        assert back[-1] == params[-1]  # v_hat is the final entry

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ck.txt"
        path.write_text("other-format v9\n1.0\n")
        with pytest.raises(h.CheckpointVersionError):
            h.load_checkpoint(path)

    def test_digest_mismatch(self, tmp_path):
        spec = MlpSpec(2, (3,), 1)
        path = tmp_path / "ck.txt"
        h.save_checkpoint(path, np.zeros(param_count(spec)), spec, "aaaa", 0)
        with pytest.raises(h.CheckpointDigestError):
            h.load_checkpoint(path, expected_digest="bbbb")

    def test_truncated_file_names_line(self, tmp_path):
        spec = MlpSpec(2, (3,), 1)
        path = tmp_path / "ck.txt"
        h.save_checkpoint(path, np.arange(param_count(spec), dtype=float), spec, "aa", 0)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(h.CheckpointParseError):
            h.load_checkpoint(path)

    def test_malformed_line_names_line(self, tmp_path):
        spec = MlpSpec(2, (3,), 1)
        path = tmp_path / "ck.txt"
        h.save_checkpoint(path, np.zeros(param_count(spec)), spec, "aa", 0)
        lines = path.read_text().splitlines()
        lines[6] = "not-a-number"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(h.CheckpointParseError) as exc:
            h.load_checkpoint(path)
        assert "line 7" in str(exc.value)

    def test_error_codes_distinct(self):
        codes = {h.CheckpointVersionError.code, h.CheckpointDigestError.code,
                 h.CheckpointParseError.code}
        assert len(codes) == 3


class TestTruthCommand:
    def test_artifacts_and_fixed_vhat(self, tiny_truth):
        art = tiny_truth
        assert art.checkpoint.exists() and art.history.exists()
        assert art.params[-1] == 0.0  # v_hat slot untouched when fixed
        assert art.report["avg_abs_laplacian"] >= 0.0
        lines = art.history.read_text().splitlines()
        assert lines[0] == ",".join(h.HISTORY_COLUMNS)
        assert len(lines) == 2 + art.rows[-1].epoch  # header + epochs + terminal

    def test_rerun_bit_identical_history(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="truth", seed=0, epochs=60, out_dir=str(tmp_path / "again"))
        art2 = h.cmd_truth(cfg)
        assert art2.history.read_text() == tiny_truth.history.read_text()


class TestTrainCommand:
    def test_requires_truth(self, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=1, out_dir=str(tmp_path))
        with pytest.raises(ConfigurationError):
            h.cmd_train(cfg)

    def test_shared_init_across_modes(self, tiny_truth, tmp_path):
        # identical seed => identical initialization in both modes
        seen = {}
        for mode in ("naive", "qpgd"):
            cfg = tiny_config(mode=mode, seed=4, epochs=1, pretrain=False,
                              out_dir=str(tmp_path / mode),
                              truth_checkpoint=str(tiny_truth.checkpoint))
            h.cmd_train(cfg)
            seeds = h.derive_seeds(4)
            seen[mode] = init_params(cfg.spec, seeds["init"])
        assert np.array_equal(seen["naive"], seen["qpgd"])

    def test_history_columns_and_terminal_row(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="naive", seed=2, out_dir=str(tmp_path / "n"),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        art = h.cmd_train(cfg)
        lines = art.history.read_text().splitlines()
        assert lines[0] == "epoch,f,g,alpha,gamma,l_data,l_pde,l_bc0,l_bcv"
        assert len(lines) == 1 + cfg.epochs + 1
        assert art.rows[-1].epoch == cfg.epochs
        # naive mode records no filter activity
        assert all(r.alpha == 0.0 for r in art.rows)

    def test_qpgd_alpha_consistent_with_numerator(self, tiny_truth, tmp_path):
        # recorded alpha > 0 must coincide with a positive barrier numerator;
        # recompute the numerator from the actual gradients at each step
        cfg = tiny_config(mode="qpgd", seed=3, epochs=20, pretrain=False,
                          out_dir=str(tmp_path / "q"),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        truth_field = h._load_truth_field(cfg)
        _, seeds, _, _, problem = h.build_problem(cfg, truth_field)
        params = init_params(cfg.spec, seeds["init"])
        from qpgd.optimizer import AdamState, qpgd_epoch

        state = AdamState.zeros(params.size)
        for epoch in range(20):
            f_val, gf, _ = problem.objective_with_grad(params)
            g_val, gg, _ = problem.constraint_with_grad(params)
            numerator = -float(gf @ gg) + cfg.c * g_val
            a = alpha_of(gf, gg, g_val, cfg.qpgd)
            if a > 0:
                assert numerator > 0
            if numerator <= 0:
                assert a == 0.0
            params, state, rec = qpgd_epoch(
                params, lambda p: problem.objective_with_grad(p)[:2],
                lambda p: problem.constraint_with_grad(p)[:2],
                cfg.qpgd, cfg.schedule, state, epoch)
            assert rec.alpha == a

    def test_metrics_report_written(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=5, epochs=15, pretrain_cap=5,
                          out_dir=str(tmp_path / "q2"),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        art = h.cmd_train(cfg)
        rep = h.read_report(art.metrics_file)
        for key in ("v_hat", "avg_abs_error_interior", "avg_abs_laplacian",
                    "terminal_g", "terminal_l_data"):
            assert key in rep
        assert (art.out_dir / "grid.csv").exists()
        assert (art.out_dir / "measurements.txt").exists()

    def test_probe_positions_shared_across_seeds(self, tiny_truth, tmp_path):
        pts = {}
        for seed in (11, 12):
            cfg = tiny_config(mode="naive", seed=seed, epochs=1,
                              out_dir=str(tmp_path / f"s{seed}"),
                              truth_checkpoint=str(tiny_truth.checkpoint))
            h.cmd_train(cfg)
            _, _, p, labels, _ = cap.load_points(tmp_path / f"s{seed}" / "measurements.txt")
            pts[seed] = (p, labels)
        assert np.array_equal(pts[11][0], pts[12][0])  # same probes
        assert not np.array_equal(pts[11][1], pts[12][1])  # different noise


class TestPretrain:
    def test_immediate_return_when_threshold_met(self, tmp_path):
        # labels produced by the zero field with zero noise: the zero-init
        # network already satisfies the data term
        geomless = tiny_config(mode="truth", seed=0, epochs=1,
                               out_dir=str(tmp_path / "t0"))
        spec = geomless.spec
        zero = np.zeros(param_count(spec))
        h.save_checkpoint(tmp_path / "zero.txt", zero, spec,
                          h.config_digest(geomless), 0)
        cfg = tiny_config(mode="qpgd", seed=1, delta=1e-6,
                          pretrain_threshold=1e-4,
                          out_dir=str(tmp_path / "p"),
                          truth_checkpoint=str(tmp_path / "zero.txt"))
        params, state, epoch, fired, rows = h.cmd_pretrain(
            cfg, params=np.zeros(param_count(cfg.spec)))
        assert fired and epoch == 0 and rows == []

    def test_cap_warns_and_returns(self, tiny_truth, tmp_path, capsys):
        cfg = tiny_config(mode="qpgd", seed=1, pretrain_cap=3,
                          pretrain_threshold=1e-12,
                          out_dir=str(tmp_path),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        params, state, epoch, fired, rows = h.cmd_pretrain(cfg)
        assert not fired and epoch == 3 and len(rows) == 3
        assert "cap" in capsys.readouterr().err

    def test_fired_params_satisfy_constraint(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=2, pretrain_cap=500, epochs=500,
                          pretrain_threshold=0.05,  # loose: fires quickly
                          out_dir=str(tmp_path),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        params, _, epoch, fired, _ = h.cmd_pretrain(cfg)
        if fired:
            truth_field = h._load_truth_field(cfg)
            _, _, _, _, problem = h.build_problem(cfg, truth_field)
            _, _, l_data = problem.constraint_with_grad(params)
            assert l_data**2 <= 0.05 + 1e-12


class TestEvaluate:
    def test_truth_against_itself_zero_error(self, tiny_truth, tmp_path):
        rep = h.cmd_evaluate(tiny_truth.checkpoint, tiny_truth.checkpoint,
                             grid_resolution=30, out_dir=str(tmp_path))
        assert rep["avg_abs_error_interior"] == 0.0
        assert (tmp_path / "metrics.txt").exists()
        assert (tmp_path / "grid.csv").exists()

    def test_digest_mismatch_warns(self, tiny_truth, capsys):
        h.cmd_evaluate(tiny_truth.checkpoint, tiny_truth.checkpoint,
                       grid_resolution=20, expected_digest="deadbeef")
        assert "digest" in capsys.readouterr().err


class TestSampleCommand:
    def test_writes_loadable_sets(self, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=6, out_dir=str(tmp_path))
        out = h.cmd_sample(cfg)
        for name in ("interior.txt", "grounded.txt", "top.txt", "measurement_points.txt"):
            assert (out / name).exists()
        _, _, pts, _, _ = cap.load_points(out / "interior.txt")
        assert pts.shape == (cfg.n_pde, 2)
        geom = cap.capacitor_geometry()
        assert np.all(geom.contains(pts[:, 0], pts[:, 1]))

    def test_labels_when_truth_available(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=6, out_dir=str(tmp_path),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        out = h.cmd_sample(cfg)
        _, _, pts, labels, deltas = cap.load_points(out / "measurements.txt")
        assert labels is not None and len(labels) == cfg.n_meas
        assert np.all(deltas == cfg.delta)


class TestDiagnoseCommand:
    def test_on_run_history(self, tiny_truth, tmp_path):
        cfg = tiny_config(mode="qpgd", seed=3, epochs=15, pretrain_cap=5,
                          out_dir=str(tmp_path / "run"),
                          truth_checkpoint=str(tiny_truth.checkpoint))
        art = h.cmd_train(cfg)
        lines = h.cmd_diagnose(art.history, out_path=tmp_path / "report.txt", c=cfg.c)
        assert (tmp_path / "report.txt").exists()
        assert any("advisory" in ln for ln in lines)

    def test_missing_columns_is_format_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("epoch,f\n0,1.0\n")
        with pytest.raises(ConfigurationError):
            h.cmd_diagnose(bad)

    def test_empty_history_is_format_error(self, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("epoch,f,g,alpha,gamma\n")
        with pytest.raises(ConfigurationError):
            h.cmd_diagnose(bad)


class TestCli:
    def test_sample_subcommand(self, tmp_path):
        rc = cli.main(["sample", "--n-pde", "25", "--n-bc0", "10", "--n-bcv", "5",
                       "--seed", "3", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "interior.txt").exists()

    def test_flag_overrides_and_scale(self, tmp_path):
        import argparse

        parser_args = ["sample", "--scale", "full", "--n-pde", "10",
                       "--out", str(tmp_path / "s")]
        rc = cli.main(parser_args)
        assert rc == 0
        _, _, pts, _, _ = cap.load_points(tmp_path / "s" / "interior.txt")
        assert pts.shape[0] == 10  # flag beat the preset

    def test_evaluate_subcommand(self, tiny_truth, capsys):
        rc = cli.main(["evaluate", str(tiny_truth.checkpoint), str(tiny_truth.checkpoint),
                       "--grid-resolution", "20"])
        assert rc == 0
        assert "v_hat" in capsys.readouterr().out

    def test_train_requires_mode_sanity(self, tmp_path):
        with pytest.raises(ConfigurationError):
            cli.main(["train", "--mode", "truth", "--out", str(tmp_path)])
