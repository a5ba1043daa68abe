"""
Tests de la ligne de commande
"""
import json

import pytest
from click.testing import CliRunner

from app import cli
from commands.common import DATA_DIR

TINY_SCHEMA = str(DATA_DIR / 'tiny_schema.json')


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def log_path(runner, tmp_path):
    path = tmp_path / 'impressions.sifl'
    result = runner.invoke(cli, ['gen-data', '--users', '12', '--items', '10', '--impressions', '240',
                                 '--seed', '3', '--schema', TINY_SCHEMA, '--out', str(path)])
    assert result.exit_code == 0, result.output
    return path


def train_args(log_path, out, *extra):
    return ['train', '--profile', 'testing', '--schema', TINY_SCHEMA, '--data', str(log_path),
            '--out', str(out), '--max-epochs', '1', *extra]


class TestGenData:
    """Commande gen-data"""

    def test_missing_flag_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(cli, ['gen-data', '--users', '5', '--items', '5', '--impressions', '10',
                                     '--out', str(tmp_path / 'x.sifl')])
        assert result.exit_code == 2

    def test_same_seed_same_bytes(self, runner, log_path, tmp_path):
        again = tmp_path / 'again.sifl'
        runner.invoke(cli, ['gen-data', '--users', '12', '--items', '10', '--impressions', '240',
                            '--seed', '3', '--schema', TINY_SCHEMA, '--out', str(again)])
        assert again.read_bytes() == log_path.read_bytes()

    def test_signal_strength_range(self, runner, tmp_path):
        result = runner.invoke(cli, ['gen-data', '--users', '5', '--items', '5', '--impressions', '10',
                                     '--seed', '1', '--signal-strength', '1.5', '--out', str(tmp_path / 'x.sifl')])
        assert result.exit_code == 2


class TestReport:
    """Commande report"""

    def test_reference_table(self, runner, tmp_path):
        result = runner.invoke(cli, ['report', '--out', str(tmp_path / 'report.csv')])
        assert result.exit_code == 0
        assert '237.04' in result.output
        assert '2400.00' in result.output
        assert (tmp_path / 'report.csv').read_text().startswith('variant,snapshot_bits')

    def test_single_variant(self, runner):
        result = runner.invoke(cli, ['report', '--variant', 'dense_raw'])
        assert result.exit_code == 0
        assert '9.38' in result.output and 'full' not in result.output


class TestGradcheck:
    """Commande gradcheck"""

    def test_tiny_passes(self, runner):
        result = runner.invoke(cli, ['gradcheck', '--tiny', '--max-coords', '8'])
        assert result.exit_code == 0, result.output
        assert '"passed": true' in result.output

    def test_requires_configuration(self, runner):
        assert runner.invoke(cli, ['gradcheck']).exit_code == 2


class TestPipeline:
    """train -> tokenize -> eval"""

    def test_train_tokenize_eval(self, runner, log_path, tmp_path):
        run_dir = tmp_path / 'run'
        result = runner.invoke(cli, train_args(log_path, run_dir))
        assert result.exit_code == 0, result.output
        for name in ('config.json', 'metrics.csv', 'history.json', 'run.log', 'mixer_best.sifm'):
            assert (run_dir / name).exists()

        store = tmp_path / 'tokens.sifs'
        result = runner.invoke(cli, ['tokenize', '--checkpoint', str(run_dir / 'tokenizer_best.sifc'),
                                     '--data', str(log_path), '--schema', TINY_SCHEMA, '--out', str(store)])
        assert result.exit_code == 0, result.output

        result = runner.invoke(cli, ['eval', '--checkpoint', str(run_dir / 'mixer_best.sifm'), '--store', str(store),
                                     '--data', str(log_path), '--schema', TINY_SCHEMA, '--split', 'train',
                                     '--out', str(tmp_path / 'report.json')])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / 'report.json').read_text())
        assert 0.0 <= report['auc'] <= 1.0

    def test_zero_learning_rate_run(self, runner, log_path, tmp_path):
        result = runner.invoke(cli, train_args(log_path, tmp_path / 'run', '--lr', '0'))
        assert result.exit_code == 0, result.output
        assert json.loads((tmp_path / 'run' / 'config.json').read_text())['lr'] == 0.0

    def test_flags_override_config_file(self, runner, log_path, tmp_path):
        cfg = tmp_path / 'run.cfg'
        cfg.write_text('seq_len=3\nseed=5\n')
        result = runner.invoke(cli, train_args(log_path, tmp_path / 'run', '--config', str(cfg), '--seed', '9'))
        assert result.exit_code == 0, result.output
        frozen = json.loads((tmp_path / 'run' / 'config.json').read_text())
        assert frozen['seq_len'] == 3 and frozen['seed'] == 9

    def test_unknown_config_key(self, runner, log_path, tmp_path):
        cfg = tmp_path / 'run.cfg'
        cfg.write_text('colour=blue\n')
        result = runner.invoke(cli, train_args(log_path, tmp_path / 'run', '--config', str(cfg)))
        assert result.exit_code == 1

    def test_missing_data(self, runner, tmp_path):
        result = runner.invoke(cli, ['train', '--profile', 'testing', '--out', str(tmp_path / 'run')])
        assert result.exit_code == 2

    def test_log_from_other_schema(self, runner, log_path, tmp_path):
        result = runner.invoke(cli, ['train', '--profile', 'testing', '--data', str(log_path),
                                     '--out', str(tmp_path / 'run')])
        assert result.exit_code == 1
