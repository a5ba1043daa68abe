"""
Tests de l'entraînement conjoint et de la vérification des gradients
"""
import copy
import math

import numpy as np
import pytest
import torch

from datagen import generate_log
from exceptions import TrainingDivergedError
from models import MetricReport
from training import (
    alignment_loss, build_batch, build_models, build_optimizer, compute_losses, evaluate, fit, gradcheck,
    predict_rows, train_step
)


@pytest.fixture
def batch(tiny_log, tiny_settings):
    _, lengths = tiny_log.history_rows(np.arange(len(tiny_log)), tiny_settings.seq_len)
    rows = np.concatenate([np.flatnonzero(lengths > 0)[:6], np.flatnonzero(lengths == 0)[:2]])
    return build_batch(tiny_log, rows, tiny_settings.seq_len)


@pytest.fixture
def models(tiny, tiny_settings):
    torch.manual_seed(0)
    return build_models(tiny, tiny_settings, n_items=10)


def snapshot(*modules):
    return [copy.deepcopy(m.state_dict()) for m in modules]


class TestLosses:
    """Composantes de la perte"""

    def test_zero_head_gives_ln2(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        with torch.no_grad():
            mixer.head[-1].weight.zero_()
            mixer.head[-1].bias.zero_()
        _, parts = compute_losses(batch, tokenizer, mixer, tiny_settings)
        assert float(parts['bce']) == pytest.approx(math.log(2), abs=1e-12)

    def test_total_is_weighted_sum(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        settings = tiny_settings.merged({'beta_vq': 0.5, 'gamma_align': 0.25, 'token_weight': 2.0})
        total, parts = compute_losses(batch, tokenizer, mixer, settings)
        expected = parts['bce'] + 0.5 * parts['vq'] + 0.25 * parts['align'] + 2.0 * parts['token']
        assert float(total) == pytest.approx(float(expected), rel=1e-12)

    def test_gamma_zero_isolates_alignment(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        with_align, parts = compute_losses(batch, tokenizer, mixer, tiny_settings)
        without, other = compute_losses(batch, tokenizer, mixer, tiny_settings.merged({'gamma_align': 0.0}))
        assert float(parts['bce']) == pytest.approx(float(other['bce']), abs=1e-12)
        assert float(with_align - without) == pytest.approx(0.25 * float(parts['align']), rel=1e-9)

    def test_alignment_does_not_reach_tokenizer_codes(self, batch, models):
        tokenizer, mixer = models
        alignment_loss(tokenizer, mixer, batch.target_values).backward()
        assert tokenizer.codebooks.grad is None or torch.count_nonzero(tokenizer.codebooks.grad) == 0
        for layer in tokenizer.proj:
            assert layer.weight.grad is None or torch.count_nonzero(layer.weight.grad) == 0
        assert any(torch.count_nonzero(layer.weight.grad) > 0 for layer in mixer.w_res)

    def test_baseline_variants_have_no_tokenizer_terms(self, tiny, batch, tiny_settings):
        settings = tiny_settings.merged({'variant': 'item_id_only'})
        tokenizer, mixer = build_models(tiny, settings, n_items=10)
        _, parts = compute_losses(batch, tokenizer, mixer, settings)
        assert float(parts['vq']) == 0.0 and float(parts['align']) == 0.0 and float(parts['token']) == 0.0


class TestTrainStep:
    """Un pas d'optimisation"""

    def test_zero_learning_rate_keeps_parameters(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        settings = tiny_settings.merged({'lr': 0.0})
        before = snapshot(tokenizer, mixer)
        optimizer = build_optimizer(tokenizer, mixer, settings)
        for _ in range(3):
            train_step(batch, tokenizer, mixer, optimizer, settings)
        for saved, module in zip(before, (tokenizer, mixer)):
            for name, tensor in module.state_dict().items():
                assert torch.equal(saved[name], tensor), name

    def test_step_changes_parameters(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        before = copy.deepcopy(mixer.head[-1].weight.detach())
        optimizer = build_optimizer(tokenizer, mixer, tiny_settings)
        breakdown = train_step(batch, tokenizer, mixer, optimizer, tiny_settings)
        assert not torch.equal(before, mixer.head[-1].weight.detach())
        assert math.isfinite(breakdown.total)

    def test_shards_match_full_batch_gradients(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        twins = copy.deepcopy(tokenizer), copy.deepcopy(mixer)
        settings = tiny_settings.merged({'lr': 0.0})
        train_step(batch, tokenizer, mixer, build_optimizer(tokenizer, mixer, settings), settings)
        sharded = settings.merged({'shards': 3})
        train_step(batch, *twins, build_optimizer(*twins, sharded), sharded)
        for whole, split in zip((tokenizer, mixer), twins):
            for (name, a), (_, b) in zip(whole.named_parameters(), split.named_parameters()):
                if a.grad is None:
                    assert b.grad is None or torch.count_nonzero(b.grad) == 0, name
                else:
                    assert torch.allclose(a.grad, b.grad, atol=1e-10), name

    def test_divergence_is_reported(self, batch, models, tiny_settings):
        tokenizer, mixer = models
        with torch.no_grad():
            mixer.head[-1].bias.fill_(float('nan'))
        optimizer = build_optimizer(tokenizer, mixer, tiny_settings)
        with pytest.raises(TrainingDivergedError):
            train_step(batch, tokenizer, mixer, optimizer, tiny_settings)

    def test_layer_norm_and_bias_are_not_decayed(self, models, tiny_settings):
        tokenizer, mixer = models
        optimizer = build_optimizer(tokenizer, mixer, tiny_settings)
        decay, exempt = optimizer.param_groups
        assert exempt['weight_decay'] == 0.0
        exempt_ids = {id(p) for p in exempt['params']}
        assert id(mixer.blocks[0].ffn_norm.weight) in exempt_ids
        assert id(mixer.head[0].bias) in exempt_ids
        assert id(mixer.head[0].weight) not in exempt_ids


class TestFit:
    """Boucle d'entraînement complète"""

    def test_smoke(self, tiny_log, tiny, tiny_settings, tmp_path):
        result = fit(tiny_log, tiny, tiny_settings, run_dir=tmp_path)
        assert 1 <= len(result.history) <= tiny_settings.max_epochs
        assert all(math.isfinite(loss) for loss in result.epoch_losses)
        assert result.best_epoch >= 0
        for name in ('metrics.csv', 'tokenizer_best.sifc', 'mixer_best.sifm', 'tokenizer_epoch0.sifc'):
            assert (tmp_path / name).exists()

    def test_training_loss_decreases(self, tiny, tiny_settings, tmp_path):
        log = generate_log(tiny, n_users=12, n_items=10, n_impressions=960, seed=3, signal_strength=1.0)
        settings = tiny_settings.merged({'max_epochs': 3, 'patience': 3})
        result = fit(log, tiny, settings, run_dir=tmp_path)
        losses = result.epoch_losses
        assert len(losses) == 3
        assert losses[0] > losses[1] > losses[2]

    def test_deterministic(self, tiny_log, tiny, tiny_settings):
        first = fit(tiny_log, tiny, tiny_settings)
        second = fit(tiny_log, tiny, tiny_settings)
        assert first.epoch_losses == second.epoch_losses
        for name, tensor in first.mixer.state_dict().items():
            assert torch.equal(second.mixer.state_dict()[name], tensor)

    def test_evaluate_report(self, tiny_log, models, tiny_settings):
        tokenizer, mixer = models
        rows = np.arange(len(tiny_log))
        report = evaluate(tiny_log, rows, tokenizer, mixer, tiny_settings)
        assert isinstance(report, MetricReport)
        assert report.n_scored == len(tiny_log)
        assert 0.0 <= report.auc <= 1.0
        assert report.params['tokenizer'] > 0 and report.params['mixer'] > 0

    def test_predict_no_rows(self, tiny_log, models, tiny_settings):
        scores, lengths = predict_rows(tiny_log, [], *models, tiny_settings.seq_len)
        assert scores.size == 0 and lengths.size == 0


class TestGradcheck:
    """Différences finies avec indices gelés"""

    @pytest.mark.parametrize('mode', ['full', 'mixer_only'])
    def test_analytic_gradients(self, mode):
        report = gradcheck(mode=mode, seed=0)
        assert report.max_rel_err <= 1e-4, report.to_dict()
        assert report.passed

    def test_mixer_only_skips_tokenizer(self):
        report = gradcheck(mode='mixer_only', seed=0, max_coords=4)
        assert not any(name.startswith('tokenizer.') for name in report.groups)

    def test_large_step_flags_argmin_flips(self):
        report = gradcheck(mode='full', seed=0, step=1.0, max_coords=16)
        assert report.non_smooth_groups

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            gradcheck(mode='partial')
