"""
Tests du codec binaire et du token store
"""
from dataclasses import replace

import numpy as np
import pytest

from exceptions import CodecError, SchemaMismatchError, StoreFormatError, UnknownSampleError
from features import reference_schema
from models import TokenSample
from tokenizer import SampleTokenizer
from tokenstore import (
    STORE_HEADER, TokenStore, build_store, compression_report, pack, pack_many, packed_size, unpack,
    unpack_many
)
from training import predict_rows, score_with_store


@pytest.fixture
def store_path(tiny_log, tiny_models, tmp_path):
    tokenizer, _ = tiny_models
    path = tmp_path / 'tokens.sifs'
    build_store(tiny_log, tokenizer, path, batch_size=7)
    return path


class TestCodec:
    """pack / unpack"""

    def test_reference_record_size(self):
        schema = reference_schema()
        assert packed_size(27, 3, 8) == 81
        sample = TokenSample(np.full((27, 3), 255, dtype=np.int64))
        assert len(pack(sample, schema.bits_per_index)) == 81

    def test_zero_indices_pack_to_zero_bytes(self):
        assert pack(TokenSample(np.zeros((5, 3), dtype=np.int64)), 7) == b'\x00' * packed_size(5, 3, 7)

    def test_low_bits_first(self):
        assert pack(TokenSample(np.array([[1, 2]])), 4) == b'\x21'

    def test_random_geometries(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            slots, levels, bits = int(rng.integers(1, 30)), int(rng.integers(1, 5)), int(rng.integers(1, 17))
            indices = rng.integers(0, 1 << bits, size=(4, slots, levels))
            packed = pack_many(indices, bits)
            assert packed.shape == (4, packed_size(slots, levels, bits))
            assert np.array_equal(unpack_many(packed, slots, levels, bits), indices)

    def test_single_code_needs_no_bytes(self):
        sample = TokenSample(np.zeros((4, 2), dtype=np.int64))
        assert pack(sample, 0) == b''
        assert unpack(b'', 4, 2, 0) == sample

    def test_index_too_large(self):
        with pytest.raises(CodecError):
            pack(TokenSample(np.array([[8]])), 3)

    def test_wrong_length(self):
        with pytest.raises(CodecError):
            unpack(b'\x00\x00', 1, 1, 3)

    def test_nonzero_padding_bits(self):
        with pytest.raises(CodecError):
            unpack(b'\xff', 1, 1, 3)


class TestTokenStore:
    """Construction et lecture du store"""

    def test_contains_every_positive(self, tiny_log, tiny_models, store_path):
        tokenizer, _ = tiny_models
        with TokenStore(store_path, tiny_log.schema) as store:
            positives = np.flatnonzero(tiny_log.labels == 1)
            assert len(store) == positives.size
            for row in positives[:10]:
                assert store.lookup(int(tiny_log.sample_ids[row])) == tokenizer.tokenize(tiny_log.sample(int(row)))

    def test_negative_is_absent(self, tiny_log, store_path):
        row = int(np.flatnonzero(tiny_log.labels == 0)[0])
        with TokenStore(store_path) as store:
            assert store.lookup(int(tiny_log.sample_ids[row])) is None
            with pytest.raises(UnknownSampleError):
                store.lookup_many([tiny_log.sample_ids[row]])

    def test_file_size(self, tiny_log, store_path):
        n_positive = int(tiny_log.labels.sum())
        assert store_path.stat().st_size == STORE_HEADER.size + n_positive * (8 + packed_size(3, 2, 2))

    def test_rebuild_is_byte_identical(self, tiny_log, tiny_models, store_path, tmp_path):
        tokenizer, _ = tiny_models
        build_store(tiny_log, tokenizer, tmp_path / 'again.sifs')
        assert (tmp_path / 'again.sifs').read_bytes() == store_path.read_bytes()

    def test_keys_sorted(self, store_path):
        with TokenStore(store_path) as store:
            assert np.all(np.diff(store.sample_ids().astype(np.int64)) > 0)

    def test_empty_store(self, tiny_log, tiny_models, tmp_path):
        tokenizer, _ = tiny_models
        silent = replace(tiny_log, labels=np.zeros_like(tiny_log.labels))
        header = build_store(silent, tokenizer, tmp_path / 'empty.sifs')
        assert header.count == 0
        with TokenStore(tmp_path / 'empty.sifs') as store:
            assert store.lookup(int(tiny_log.sample_ids[0])) is None
            assert store.lookup_many([]).shape == (0, 3, 2)

    def test_schema_mismatch(self, desk, store_path):
        with pytest.raises(SchemaMismatchError):
            TokenStore(store_path, desk)

    def test_tokenizer_from_other_schema(self, tiny_log, desk, tmp_path):
        with pytest.raises(SchemaMismatchError):
            build_store(tiny_log, SampleTokenizer(desk), tmp_path / 'bad.sifs')

    def test_interrupted_build(self, tmp_path):
        path = tmp_path / 'partial.sifs'
        path.write_bytes(b'\x00' * (STORE_HEADER.size + 10))
        with pytest.raises(StoreFormatError):
            TokenStore(path)

    def test_truncated_records(self, store_path):
        store_path.write_bytes(store_path.read_bytes()[:-1])
        with pytest.raises(StoreFormatError):
            TokenStore(store_path)


class TestServing:
    """Chemin de service contre chemin d'entraînement"""

    def test_scores_match_on_the_fly(self, tiny_log, tiny_models, tiny_settings, store_path):
        tokenizer, mixer = tiny_models
        rows = np.arange(len(tiny_log))
        expected, _ = predict_rows(tiny_log, rows, tokenizer, mixer, tiny_settings.seq_len)
        with TokenStore(store_path, tiny_log.schema) as store:
            served = score_with_store(tiny_log, rows, tokenizer, mixer, tiny_settings, store)
        assert np.allclose(served, expected, atol=1e-6)

    def test_missing_history_is_reported(self, tiny_log, tiny_models, tiny_settings, tmp_path):
        tokenizer, mixer = tiny_models
        path = tmp_path / 'tokens.sifs'
        build_store(replace(tiny_log, labels=np.zeros_like(tiny_log.labels)), tokenizer, path)
        _, lengths = tiny_log.history_rows(np.arange(len(tiny_log)), tiny_settings.seq_len)
        with TokenStore(path) as store:
            with pytest.raises(UnknownSampleError):
                score_with_store(tiny_log, np.flatnonzero(lengths > 0)[:2], tokenizer, mixer, tiny_settings,
                                 store)


class TestCompression:
    """Bits par échantillon sur le schéma de référence"""

    @pytest.mark.parametrize('variant,bits,ratio', [
        ('full', 648, 237.04),
        ('item_id_only', 64, 2400.0),
        ('item_plus_key', 832, 184.62),
        ('dense_raw', 16384, 9.375),
    ])
    def test_reference_numbers(self, variant, bits, ratio):
        report = compression_report(reference_schema(), variant)
        assert report['snapshot_bits'] == 153600
        assert report['bits_per_sample'] == bits
        assert report['ratio'] == pytest.approx(ratio, abs=0.005)
