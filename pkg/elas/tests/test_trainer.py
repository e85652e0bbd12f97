"""
Tests for the training loop, evaluation, resume and ablations.
"""

import math

import numpy as np
import pandas as pd
import pytest

from elas.core.config import build_train_config
from elas.core.exceptions import ConfigurationError, NonFiniteGradientError
from elas.schemas.train import METRICS_COLUMNS, SparsifierKind
from elas.services import trainer as trainer_module
from elas.services.ablation import ABLATION_COLUMNS, run_sparsifier_ablation, run_warmup_ablation
from elas.services.trainer import (
    RunStatus,
    Trainer,
    evaluate_checkpoint,
    periodic_checkpoint_path,
    read_metrics,
    run_training,
    with_run_dir,
)


class TestRun:
    """Test a complete short run."""

    def test_completes_with_expected_rows(self, corpus, fast_config):
        """Rows at step 0, every eval_interval, and the end."""
        result = run_training(fast_config, corpus=corpus)
        assert result.status == RunStatus.COMPLETED
        assert [row.step for row in result.metrics] == [0, 4, 8, 12]
        assert result.steps_run == 12
        assert result.checkpoint_path == fast_config.resolved_checkpoint_path
        assert result.checkpoint_path.is_file()

    def test_csv_header_and_perplexity(self, corpus, fast_config):
        """The metrics file has the fixed header and ppl = exp(eval_loss)."""
        result = run_training(fast_config, corpus=corpus)
        frame = read_metrics(result.metrics_path)
        assert list(frame.columns) == METRICS_COLUMNS
        for loss, ppl in zip(frame["eval_loss"], frame["eval_ppl"]):
            assert ppl == pytest.approx(math.exp(loss), rel=1e-12)
        assert np.all(frame["ms_per_step"] == 0.0)

    def test_record_timing_writes_step_times(self, corpus, fast_config):
        """Opting in to timing fills ms_per_step for rows after training steps."""
        result = run_training(fast_config.with_overrides(record_timing=True), corpus=corpus)
        frame = read_metrics(result.metrics_path)
        assert frame["ms_per_step"].iloc[0] == 0.0
        assert (frame["ms_per_step"].iloc[1:] > 0.0).all()

    def test_loss_decreases(self, corpus, tiny_config):
        """Forty steps on the byte corpus beat the initial eval loss."""
        result = run_training(tiny_config, corpus=corpus)
        assert result.final.eval_loss < result.metrics[0].eval_loss

    def test_reruns_are_byte_identical(self, corpus, fast_config, tmp_path):
        """Same config and seed give the same CSV bytes."""
        first = run_training(with_run_dir(fast_config, tmp_path / "a"), corpus=corpus)
        second = run_training(with_run_dir(fast_config, tmp_path / "b"), corpus=corpus)
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()

    def test_refresh_count(self, corpus, fast_config):
        """Refresh after steps 5 and 10 over every low-rank layer."""
        result = run_training(fast_config, corpus=corpus)
        layers = len(result.model.low_rank_layers())
        assert result.refreshes == 2 * layers
        assert result.optimizer.step == 12

    def test_zero_total_steps(self, corpus, fast_config):
        """No training still produces a step-0 evaluation row."""
        config = fast_config.with_overrides(total_steps=0, warmup_steps=0)
        result = run_training(config, corpus=corpus)
        assert [row.step for row in result.metrics] == [0]
        assert math.isnan(result.final.train_loss)
        assert math.isfinite(result.final.eval_loss)


class TestWarmup:
    """Test the dense-to-sparse switch."""

    def test_first_sparse_step_is_warmup(self, corpus, fast_config):
        """The sparsifier first runs at step == warmup_steps."""
        result = run_training(fast_config, corpus=corpus)
        assert result.first_sparse_step == fast_config.warmup_steps

    def test_full_warmup_never_sparsifies(self, corpus, fast_config):
        """warmup_steps == total_steps trains dense throughout."""
        config = fast_config.with_overrides(warmup_steps=fast_config.total_steps)
        result = run_training(config, corpus=corpus)
        assert result.first_sparse_step is None
        assert result.model.sparsify_calls == 0

    def test_zero_warmup_sparsifies_immediately(self, corpus, fast_config):
        """warmup_steps == 0 is sparse from step 0."""
        result = run_training(fast_config.with_overrides(warmup_steps=0), corpus=corpus)
        assert result.first_sparse_step == 0

    def test_dense_baseline(self, corpus, fast_config):
        """No sparsifier means no sparse steps at all."""
        result = run_training(fast_config.with_overrides(sparsifier=None), corpus=corpus)
        assert result.first_sparse_step is None

    def test_saved_bytes_shrink_after_warmup(self, corpus, fast_config):
        """FFN intermediates saved for backward drop to 9/16 once sparse."""
        result = run_training(fast_config, corpus=corpus)
        dense, sparse = result.saved_ffn_bytes
        assert sparse / dense == pytest.approx(9 / 16)

    def test_soft_activation_calibrates_on_first_sparse_step(self, corpus, fast_config):
        """Every layer gets a finite positive scale."""
        config = fast_config.with_overrides(sparsifier=SparsifierKind.SOFT_ACTIVATION)
        result = run_training(config, corpus=corpus)
        assert result.status == RunStatus.COMPLETED
        scales = [ffn.sparsifier.scale for ffn in result.model.ffns()]
        assert all(scale is not None and math.isfinite(scale) and scale > 0 for scale in scales)


class TestDivergence:
    """Test non-finite training states."""

    def test_nan_loss(self, corpus, fast_config):
        """A NaN forward pass ends the run with a NaN row."""
        trainer = Trainer(fast_config, corpus)
        trainer.model.embed[...] = np.nan
        result = trainer.run()
        assert result.diverged
        assert result.final.step == 0
        assert math.isnan(result.final.eval_ppl)
        assert "NaN" in result.metrics_path.read_text()

    def test_non_finite_gradient(self, corpus, fast_config, monkeypatch):
        """A bad gradient mid-run stops training and records the step."""
        original = trainer_module.step_approx

        def failing_step(state, params, grads, lr):
            if state.step == 6:
                raise NonFiniteGradientError("Non-finite gradient for embed", {"parameter": "embed"})
            return original(state, params, grads, lr)

        monkeypatch.setattr(trainer_module, "step_approx", failing_step)
        result = run_training(fast_config, corpus=corpus)
        assert result.status == RunStatus.DIVERGED
        assert [row.step for row in result.metrics] == [0, 4, 6]
        frame = read_metrics(result.metrics_path)
        assert frame["eval_loss"].isna().tolist() == [False, False, True]


class TestResume:
    """Test checkpoint resume."""

    def test_resume_reproduces_uninterrupted_run(self, corpus, fast_config, tmp_path):
        """Stopping at step 8 and resuming gives the same CSV bytes."""
        config = with_run_dir(fast_config, tmp_path / "full").with_overrides(checkpoint_every=4)
        full = run_training(config, corpus=corpus)
        midpoint = periodic_checkpoint_path(config, 8)
        assert midpoint.is_file()

        resumed_config = with_run_dir(fast_config, tmp_path / "resumed")
        resumed = run_training(resumed_config, resume_from=midpoint, corpus=corpus)
        assert resumed.steps_run == 4
        assert resumed.metrics_path.read_bytes() == full.metrics_path.read_bytes()

    def test_resume_rejects_changed_config(self, corpus, fast_config, tmp_path):
        """Training hyperparameters must match the checkpoint."""
        run_training(fast_config, corpus=corpus)
        changed = with_run_dir(fast_config, tmp_path / "other").with_overrides(base_lr=1e-2)
        with pytest.raises(ConfigurationError, match="base_lr"):
            run_training(changed, resume_from=fast_config.resolved_checkpoint_path, corpus=corpus)

    def test_resume_rejects_changed_corpus(self, corpus, fast_config, tmp_path):
        """Resuming on another corpus file is refused."""
        run_training(fast_config, corpus=corpus)
        other = tmp_path / "other.txt"
        other.write_bytes(bytes(range(256)) * 8)
        changed = with_run_dir(fast_config, tmp_path / "other").with_overrides(corpus_path=other)
        with pytest.raises(ConfigurationError, match="corpus_path"):
            run_training(changed, resume_from=fast_config.resolved_checkpoint_path, corpus=corpus)

    def test_evaluate_checkpoint_matches_final_row(self, corpus, fast_config):
        """Re-evaluating the final checkpoint reproduces the last eval loss."""
        result = run_training(fast_config, corpus=corpus)
        evaluation = evaluate_checkpoint(result.checkpoint_path, corpus=corpus)
        assert evaluation.loss == pytest.approx(result.final.eval_loss, rel=1e-12)
        assert evaluation.perplexity == pytest.approx(math.exp(evaluation.loss))

    @pytest.mark.parametrize("max_batches", [0, -1])
    def test_evaluate_checkpoint_rejects_empty_batch_limit(self, corpus, fast_config, max_batches):
        """A batch limit below 1 is a configuration error, not a division by zero."""
        result = run_training(fast_config, corpus=corpus)
        with pytest.raises(ConfigurationError, match="max_batches"):
            evaluate_checkpoint(result.checkpoint_path, corpus=corpus, max_batches=max_batches)


class TestAblation:
    """Test warmup and sparsifier sweeps."""

    def test_sparsifier_sweep(self, corpus, fast_config, tmp_path):
        """One completed row per variant, written to CSV."""
        out = tmp_path / "sweep.csv"
        table = run_sparsifier_ablation(fast_config, list(SparsifierKind), corpus=corpus, out=out)
        assert list(table.columns) == ABLATION_COLUMNS
        assert table["sparsifier"].tolist() == ["naive", "soft_weights", "soft_activation"]
        assert (table["status"] == "completed").all()
        assert pd.read_csv(out).shape == (3, len(ABLATION_COLUMNS))

    def test_warmup_sweep(self, corpus, fast_config):
        """Each warmup length runs in its own directory."""
        table = run_warmup_ablation(fast_config, [0, 4, 12], corpus=corpus)
        assert table["warmup_steps"].tolist() == [0, 4, 12]
        assert table["steps"].tolist() == [12, 12, 12]
        assert (fast_config.output_dir / "02-warmup-12" / "metrics.csv").is_file()

    def test_warmup_sweep_rerun_is_identical(self, corpus, fast_config, tmp_path):
        """Repeating a sweep with the same seed reproduces its table byte for byte."""
        first = run_warmup_ablation(
            with_run_dir(fast_config, tmp_path / "a"), [0, 4], corpus=corpus, out=tmp_path / "a.csv"
        )
        second = run_warmup_ablation(
            with_run_dir(fast_config, tmp_path / "b"), [0, 4], corpus=corpus, out=tmp_path / "b.csv"
        )
        pd.testing.assert_frame_equal(first, second)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_diverged_run_becomes_nan_row(self, corpus, fast_config, monkeypatch):
        """A diverging run is recorded with NaN results and the sweep continues."""
        original = trainer_module.step_approx
        states = []

        def diverging_first_run(state, params, grads, lr):
            if not states:
                states.append(state)
            if state is states[0] and state.step == 6:
                raise NonFiniteGradientError("Non-finite gradient for embed", {"parameter": "embed"})
            return original(state, params, grads, lr)

        monkeypatch.setattr(trainer_module, "step_approx", diverging_first_run)
        table = run_sparsifier_ablation(fast_config, ["naive", "soft_weights"], corpus=corpus)
        assert table["status"].tolist() == ["diverged", "completed"]
        assert table["steps"].tolist() == [6, 12]
        assert math.isnan(table["final_eval_loss"][0])
        assert math.isnan(table["final_ppl"][0])
        assert math.isfinite(table["final_ppl"][1])

    def test_warmup_sweep_rejects_out_of_range(self, corpus, fast_config):
        """Warmup longer than the run is a configuration error."""
        with pytest.raises(ConfigurationError):
            run_warmup_ablation(fast_config, [0, 13], corpus=corpus)

    def test_unknown_variant(self, corpus, fast_config):
        """Variant names are validated before any run starts."""
        with pytest.raises(ConfigurationError):
            run_sparsifier_ablation(fast_config, ["magnitude"], corpus=corpus)

    def test_failed_run_becomes_error_row(self, corpus, fast_config, monkeypatch):
        """An error in one run does not stop the sweep."""
        original = trainer_module.Trainer.run
        calls = []

        def flaky_run(self):
            calls.append(self.config.sparsifier)
            if len(calls) == 1:
                raise ConfigurationError("boom")
            return original(self)

        monkeypatch.setattr(trainer_module.Trainer, "run", flaky_run)
        table = run_sparsifier_ablation(fast_config, ["naive", "soft_weights"], corpus=corpus)
        assert table["status"].tolist() == ["error: boom", "completed"]
        assert math.isnan(table["final_ppl"][0])


@pytest.mark.slow
class TestDeskParity:
    """Desk-scale comparisons; run with ``pytest -m slow``."""

    def test_elas_tracks_dense_baseline(self, corpus, tmp_path):
        """Both runs cut eval loss by 20%; ELAS ends within 5% of the dense low-rank loss."""
        base = build_train_config()
        dense = run_training(
            with_run_dir(base.with_overrides(sparsifier=None), tmp_path / "dense"), corpus=corpus
        )
        sparse = run_training(with_run_dir(base, tmp_path / "elas"), corpus=corpus)
        assert dense.final.eval_loss <= 0.8 * dense.metrics[0].eval_loss
        assert sparse.final.eval_loss <= 0.8 * sparse.metrics[0].eval_loss
        assert sparse.final.eval_loss <= 1.05 * dense.final.eval_loss

    def test_warmup_sweep_at_desk_scale(self, corpus, tmp_path):
        """The default warmup list completes at desk scale."""
        base = build_train_config(overrides={"output_dir": str(tmp_path)})
        table = run_warmup_ablation(base, [0, 100, 200, 400], corpus=corpus)
        assert (table["status"] == "completed").all()
