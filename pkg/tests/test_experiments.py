"""
Tests des balayages et ablations
"""
import json

import pytest

import experiments
from config import RunConfig
from datagen import generate_log
from experiments import ablate, sweep
from features import desk_schema


@pytest.fixture
def quick(tiny_settings):
    return tiny_settings.merged({'max_epochs': 1, 'max_batches_per_epoch': 4})


class TestSweep:

    def test_single_point(self, tiny_log, tiny, quick, tmp_path):
        rows = sweep('N', [1], quick, tiny_log, tiny, tmp_path)
        assert len(rows) == 1
        assert rows[0]['value'] == 1 and rows[0]['n_slots'] == 3
        assert (tmp_path / 'sweep.csv').exists()
        assert json.loads((tmp_path / 'N_1.json').read_text())['config']['n_blocks'] == 1

    def test_failed_point_does_not_stop_sweep(self, tiny_log, tiny, quick, tmp_path):
        rows = sweep('B', [0, 2], quick, tiny_log, tiny, tmp_path)
        assert rows[0]['status'] == 'failed' and rows[0]['error']
        assert len(rows) == 2
        assert rows[1]['n_slots'] == 3

    def test_runtime_error_is_recorded(self, tiny_log, tiny, quick, tmp_path, monkeypatch):
        run_point = experiments._run_point

        def flaky(log, schema, settings, run_dir):
            if settings.n_blocks == 1:
                raise RuntimeError('CUDA out of memory')
            return run_point(log, schema, settings, run_dir)

        monkeypatch.setattr(experiments, '_run_point', flaky)
        rows = sweep('N', [1, 2], quick, tiny_log, tiny, tmp_path)
        assert rows[0]['status'] == 'failed' and 'out of memory' in rows[0]['error']
        assert rows[1]['status'] == 'ok'
        assert (tmp_path / 'sweep.csv').exists()

    def test_unknown_axis(self, tiny_log, tiny, quick, tmp_path):
        with pytest.raises(ValueError):
            sweep('Q', [1], quick, tiny_log, tiny, tmp_path)


class TestAblate:

    def test_paired_rows(self, tiny_log, tiny, quick, tmp_path):
        rows = ablate(['full', 'item_id_only'], [1, 2], quick, tiny_log, tiny, tmp_path)
        assert [r['variant'] for r in rows] == ['full', 'item_id_only']
        assert rows[0]['delta_auc'] is None
        assert rows[1]['n_seeds'] == 2
        assert (tmp_path / 'ablation.csv').exists()
        assert (tmp_path / 'full_seed1' / 'result.json').exists()

    def test_failed_seed_is_excluded(self, tiny_log, tiny, quick, tmp_path, monkeypatch):
        run_seed = experiments._run_seed

        def flaky(log, schema, settings, run_dir):
            if settings.variant == 'item_id_only' and settings.seed == 2:
                raise RuntimeError('CUDA out of memory')
            return run_seed(log, schema, settings, run_dir)

        monkeypatch.setattr(experiments, '_run_seed', flaky)
        rows = ablate(['full', 'item_id_only'], [1, 2], quick, tiny_log, tiny, tmp_path)
        assert [r['n_seeds'] for r in rows] == [2, 1]
        assert rows[1]['delta_auc'] is not None and rows[1]['t_stat'] is None
        failed = json.loads((tmp_path / 'item_id_only_seed2' / 'result.json').read_text())
        assert failed['status'] == 'failed'

    @pytest.mark.slow
    def test_representation_ordering(self, tmp_path):
        schema = desk_schema(n_items=500)
        log = generate_log(schema, n_users=1000, n_items=500, n_impressions=100000, seed=11, signal_strength=1.0)
        settings = RunConfig.from_profile('desk').merged({'seq_len': 32})
        rows = ablate(['full', 'item_plus_key', 'item_id_only'], [1, 2, 3], settings, log, schema, tmp_path)
        by_variant = {row['variant']: row for row in rows}
        full, keyed, item = by_variant['full'], by_variant['item_plus_key'], by_variant['item_id_only']
        assert full['gauc_mean'] >= keyed['gauc_mean'] >= item['gauc_mean']
        assert keyed['delta_auc'] > 0
        assert item['delta_auc'] >= 0.015
