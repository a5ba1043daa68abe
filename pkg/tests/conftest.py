"""
Fixtures partagées des tests du pipeline SIF
"""
import pytest
import torch

from config import RunConfig
from datagen import generate_log
from features import desk_schema, tiny_schema
from mixer import SIFMixer
from tokenizer import SampleTokenizer


@pytest.fixture
def tiny():
    """Schéma minuscule (T=3, d_0=4, M=2, V=4)"""
    return tiny_schema()


@pytest.fixture
def tiny_log(tiny):
    """Journal de 240 impressions sur le schéma minuscule"""
    return generate_log(tiny, n_users=12, n_items=10, n_impressions=240, seed=3)


@pytest.fixture
def desk():
    return desk_schema(n_items=50)


@pytest.fixture
def desk_log(desk):
    return generate_log(desk, n_users=40, n_items=50, n_impressions=2000, seed=11)


@pytest.fixture
def tiny_settings():
    """Configuration du profil testing, float64"""
    return RunConfig.from_profile('testing').merged({'reseed_dead_codes': False, 'zero_row_epochs': 0})


@pytest.fixture
def tiny_models(tiny, tiny_settings):
    """Tokenizer et mixer float64 sur le schéma minuscule"""
    torch.manual_seed(0)
    tokenizer = SampleTokenizer(tiny).double()
    mixer = SIFMixer(tiny, n_blocks=1, n_heads=2, max_seq_len=tiny_settings.seq_len, n_items=10).double()
    return tokenizer, mixer
