"""
Tests du SIF-Mixer
"""
import numpy as np
import pytest
import torch

from exceptions import CheckpointFormatError, SchemaMismatchError
from features import synthetic_schema
from mixer import HistoryBatch, MultiHeadAttention, SIFBlock, SIFMixer, key_field_indices, load_mixer, save_mixer
from models import VariantEnum
from tokenizer import SampleTokenizer
from training import build_batch


def zero_residual_branches(block):
    with torch.no_grad():
        for mixer in (block.token_mixer, block.sample_mixer):
            mixer.out.weight.zero_()
            mixer.out.bias.zero_()
        block.ffn.linear2.weight.zero_()
        block.ffn.linear2.bias.zero_()


@pytest.fixture
def grid():
    torch.manual_seed(1)
    hidden = torch.randn(2, 5, 3, 4, dtype=torch.float64)
    valid = torch.tensor([[True, True, True, False, False], [True, True, True, True, True]])
    return hidden, valid


@pytest.fixture
def tiny_batch(tiny_log, tiny_settings):
    _, lengths = tiny_log.history_rows(np.arange(len(tiny_log)), tiny_settings.seq_len)
    rows = np.concatenate([np.flatnonzero(lengths == 0)[:2], np.flatnonzero(lengths > 0)[:6]])
    return build_batch(tiny_log, rows, tiny_settings.seq_len)


class TestAttention:
    """MultiHeadAttention"""

    def test_weights_are_distributions(self):
        attention = MultiHeadAttention(4, 2).double()
        mask = torch.tensor([[True, True, False, True, False]] * 3)
        attention(torch.randn(3, 5, 4, dtype=torch.float64), mask, keep_weights=True)
        weights = attention.last_weights
        assert torch.allclose(weights.sum(dim=-1), torch.ones(3, 2, 5, dtype=torch.float64), atol=1e-12)
        assert torch.all(weights[..., 2] == 0) and torch.all(weights[..., 4] == 0)

    def test_single_row_attends_to_itself(self):
        attention = MultiHeadAttention(4, 2)
        attention(torch.randn(6, 1, 4), torch.ones(6, 1, dtype=torch.bool), keep_weights=True)
        assert torch.all(attention.last_weights == 1.0)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(4, 3)


class TestSIFBlock:
    """Invariants d'un SIF Block"""

    def test_zero_branches_give_identity(self, grid):
        hidden, valid = grid
        block = SIFBlock(4, 2).double()
        zero_residual_branches(block)
        assert torch.allclose(block(hidden, valid), hidden, atol=1e-12)

    @pytest.mark.parametrize('flat', [False, True])
    def test_padding_content_is_ignored(self, grid, flat):
        hidden, valid = grid
        block = SIFBlock(4, 2, flat=flat).double()
        altered = hidden.clone()
        altered[0, 3:] = torch.randn(2, 3, 4, dtype=torch.float64) * 50
        before, after = block(hidden, valid), block(altered, valid)
        assert torch.allclose(before[0, :3], after[0, :3], atol=1e-12)
        assert torch.allclose(before[1], after[1], atol=1e-12)

    def test_column_permutation_equivariance(self, grid):
        hidden, valid = grid
        block = SIFBlock(4, 2).double()
        perm = torch.tensor([2, 0, 1])
        assert torch.allclose(block(hidden[:, :, perm], valid), block(hidden, valid)[:, :, perm], atol=1e-10)

    def test_layer_norm_eps(self):
        block = SIFBlock(4, 2)
        assert block.sample_norm.eps == 1e-5 and block.ffn_norm.eps == 1e-5

    def test_token_mixer_can_be_disabled(self):
        block = SIFBlock(4, 2, use_token_mixer=False)
        assert not hasattr(block, 'token_mixer')

    def test_inconsistent_mask(self, grid):
        hidden, _ = grid
        with pytest.raises(ValueError):
            SIFBlock(4, 2).double()(hidden, torch.ones(2, 4, dtype=torch.bool))


class TestAssemble:
    """Construction de H^0"""

    def test_shapes(self, tiny_models, tiny_batch, tiny_settings):
        tokenizer, mixer = tiny_models
        hidden, valid = mixer.assemble(tokenizer, tiny_batch.target_values, tiny_batch.history)
        assert hidden.shape == (len(tiny_batch), tiny_settings.seq_len + 1, 3, 4)
        assert valid.shape == (len(tiny_batch), tiny_settings.seq_len + 1)
        assert torch.all(valid[:, 0])

    def test_padding_rows_are_zero(self, tiny_models, tiny_batch):
        tokenizer, mixer = tiny_models
        hidden, valid = mixer.assemble(tokenizer, tiny_batch.target_values, tiny_batch.history)
        assert torch.count_nonzero(hidden[~valid]) == 0

    def test_zero_codebooks_leave_recency(self, tiny_models, tiny_batch, tiny_settings):
        tokenizer, mixer = tiny_models
        with torch.no_grad():
            tokenizer.codebooks.zero_()
        hidden, _ = mixer.assemble(tokenizer, tiny_batch.target_values, tiny_batch.history)
        seq_len = tiny_settings.seq_len
        for b, length in enumerate(tiny_batch.history.lengths):
            for l in range(length):
                expected = mixer.recency.weight[seq_len - 1 - l].view(3, 4)
                assert torch.allclose(hidden[b, 1 + l], expected, atol=1e-12)

    def test_stored_indices_match_on_the_fly(self, tiny_models, tiny_batch):
        tokenizer, mixer = tiny_models
        history = tiny_batch.history
        mask = history.valid_mask()
        indices = np.zeros(history.values.shape[:2] + (3, 2), dtype=np.int64)
        indices[mask] = tokenizer.tokenize_batch(history.values[mask])
        stored = HistoryBatch(history.values, history.item_ids, history.lengths, indices=indices)
        on_the_fly = mixer.encode_history(tokenizer, history)
        assert torch.allclose(mixer.encode_history(tokenizer, stored), on_the_fly, atol=1e-12)

    def test_sequence_longer_than_max(self, tiny_models):
        _, mixer = tiny_models
        too_long = mixer.max_seq_len + 1
        with pytest.raises(ValueError):
            mixer.embed_sequence(torch.zeros(1, too_long, 3, 4, dtype=torch.float64), [too_long])


class TestForward:
    """Propagation et tête de prédiction"""

    def test_padding_receives_no_gradient(self, tiny_models, tiny_batch):
        tokenizer, mixer = tiny_models
        hidden, valid = mixer.assemble(tokenizer, tiny_batch.target_values, tiny_batch.history)
        hidden = hidden.detach().requires_grad_(True)
        mixer(hidden, valid).sum().backward()
        assert torch.count_nonzero(hidden.grad[~valid]) == 0
        assert torch.count_nonzero(hidden.grad[:, 0]) > 0

    def test_zero_head_gives_half(self, tiny_models, tiny_batch):
        tokenizer, mixer = tiny_models
        with torch.no_grad():
            mixer.head[-1].weight.zero_()
            mixer.head[-1].bias.zero_()
        scores = mixer.score(tokenizer, tiny_batch.target_values, tiny_batch.history)
        assert torch.allclose(scores, torch.full_like(scores, 0.5))

    @pytest.mark.parametrize('variant', list(VariantEnum))
    def test_every_variant_scores(self, tiny, tiny_batch, tiny_settings, variant):
        torch.manual_seed(0)
        tokenizer = SampleTokenizer(tiny).double()
        mixer = SIFMixer(tiny, variant=variant, n_blocks=1, n_heads=2, max_seq_len=tiny_settings.seq_len,
                         n_items=10, dense_dim=16).double()
        scores = mixer.score(tokenizer, tiny_batch.target_values, tiny_batch.history)
        assert scores.shape == (len(tiny_batch),)
        assert torch.all((scores > 0) & (scores < 1))

    @pytest.mark.parametrize('variant', ['full', 'pooled'])
    def test_prediction_invariant_to_column_permutation(self, tiny, tiny_batch, tiny_settings, variant):
        torch.manual_seed(0)
        tokenizer = SampleTokenizer(tiny).double()
        mixer = SIFMixer(tiny, variant=variant, n_blocks=2, n_heads=2, max_seq_len=tiny_settings.seq_len,
                         n_items=10).double()
        with torch.no_grad():
            hidden, valid = mixer.assemble(tokenizer, tiny_batch.target_values, tiny_batch.history)
            for perm in ([2, 0, 1], [1, 0, 2], [2, 1, 0]):
                permuted = hidden[:, :, torch.tensor(perm)]
                assert torch.allclose(mixer(permuted, valid), mixer(hidden, valid), atol=1e-6)

    def test_flat_equals_factored_on_single_token(self):
        schema = synthetic_schema({'user': 2}, granularity=2, sub_token_dim=4, rvq_levels=2, codebook_size=4)
        torch.manual_seed(0)
        factored = SIFMixer(schema, n_blocks=2, n_heads=2, max_seq_len=0).double()
        flat = SIFMixer(schema, variant='flat_attn', n_blocks=2, n_heads=2, max_seq_len=0).double()
        with torch.no_grad():
            for source, target in zip(factored.blocks, flat.blocks):
                source.token_mixer.out.weight.zero_()
                source.token_mixer.out.bias.zero_()
                target.flat_norm.load_state_dict(source.sample_norm.state_dict())
                target.flat_mixer.load_state_dict(source.sample_mixer.state_dict())
                target.ffn_norm.load_state_dict(source.ffn_norm.state_dict())
                target.ffn.load_state_dict(source.ffn.state_dict())
            flat.head.load_state_dict(factored.head.state_dict())
            hidden = torch.randn(5, 1, 1, 4, dtype=torch.float64)
            valid = torch.ones(5, 1, dtype=torch.bool)
            assert factored.n_slots == 1
            assert torch.allclose(flat.forward_flat(hidden, valid), factored.forward_factored(hidden, valid),
                                  atol=1e-12)

    def test_variant_block_layout(self, tiny):
        pooled = SIFMixer(tiny, variant='pooled', n_blocks=2, n_heads=2, max_seq_len=4)
        flat = SIFMixer(tiny, variant='flat_attn', n_blocks=2, n_heads=2, max_seq_len=4)
        assert all(not block.use_token_mixer for block in pooled.blocks)
        assert all(block.flat for block in flat.blocks)

    def test_forward_flat_requires_flat_blocks(self, tiny_models, grid):
        _, mixer = tiny_models
        hidden, valid = grid
        with pytest.raises(ValueError):
            mixer.forward_flat(hidden, valid)

    def test_key_fields_skip_identifiers(self, desk):
        keys = key_field_indices(desk, 24)
        assert desk.field_index('item_id') not in keys
        assert len(keys) == len(desk.fields) - 1


class TestCheckpoint:
    """Conteneur SIFM"""

    def test_round_trip(self, tiny, tmp_path):
        mixer = SIFMixer(tiny, variant='item_plus_key', n_blocks=2, n_heads=2, max_seq_len=6, n_items=10)
        save_mixer(mixer, tmp_path / 'mixer.sifm')
        loaded = load_mixer(tmp_path / 'mixer.sifm', tiny)
        assert loaded.variant is VariantEnum.ITEM_PLUS_KEY
        assert len(loaded.blocks) == 2 and loaded.max_seq_len == 6 and loaded.n_items == 10
        for name, tensor in mixer.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], tensor)

    def test_schema_mismatch(self, tiny, desk, tmp_path):
        save_mixer(SIFMixer(tiny, n_blocks=1, n_heads=2, max_seq_len=4), tmp_path / 'mixer.sifm')
        with pytest.raises(SchemaMismatchError):
            load_mixer(tmp_path / 'mixer.sifm', desk)

    def test_unreadable_file(self, tiny, tmp_path):
        path = tmp_path / 'mixer.sifm'
        path.write_bytes(b'SIF')
        with pytest.raises(CheckpointFormatError):
            load_mixer(path, tiny)
