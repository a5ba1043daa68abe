"""
Configuration centralisée du pipeline SIF
"""
import os
from dataclasses import dataclass, asdict, fields, replace

from dotenv import load_dotenv

# Charger les variables d'environnement
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == 'true'


class Config:
    """Configuration de base: hyperparamètres de référence (N=4, 8 têtes, d_0=16, Adam 1e-3)"""

    # Sample Tokenizer
    GRANULARITY = int(os.getenv('SIF_GRANULARITY', '32'))
    SUB_TOKEN_DIM = int(os.getenv('SIF_SUB_TOKEN_DIM', '16'))
    RVQ_LEVELS = int(os.getenv('SIF_RVQ_LEVELS', '3'))
    CODEBOOK_SIZE = int(os.getenv('SIF_CODEBOOK_SIZE', '256'))
    COMMITMENT = float(os.getenv('SIF_COMMITMENT', '0.25'))

    # SIF-Mixer
    N_BLOCKS = int(os.getenv('SIF_N_BLOCKS', '4'))
    N_HEADS = int(os.getenv('SIF_N_HEADS', '8'))
    SEQ_LEN = int(os.getenv('SIF_SEQ_LEN', '1000'))
    DENSE_DIM = int(os.getenv('SIF_DENSE_DIM', '512'))
    KEY_FIELDS = int(os.getenv('SIF_KEY_FIELDS', '24'))

    # Objectif
    BETA_VQ = float(os.getenv('SIF_BETA_VQ', '1.0'))
    GAMMA_ALIGN = float(os.getenv('SIF_GAMMA_ALIGN', '0.25'))
    TOKEN_WEIGHT = float(os.getenv('SIF_TOKEN_WEIGHT', '1.0'))

    # Optimiseur (Adam)
    LR = float(os.getenv('SIF_LR', '1e-3'))
    ADAM_BETA1 = float(os.getenv('SIF_ADAM_BETA1', '0.9'))
    ADAM_BETA2 = float(os.getenv('SIF_ADAM_BETA2', '0.999'))
    ADAM_EPS = float(os.getenv('SIF_ADAM_EPS', '1e-8'))
    WEIGHT_DECAY = float(os.getenv('SIF_WEIGHT_DECAY', '1e-5'))

    # Boucle d'entraînement
    BATCH_SIZE = int(os.getenv('SIF_BATCH_SIZE', '4096'))
    MAX_EPOCHS = int(os.getenv('SIF_MAX_EPOCHS', '20'))
    PATIENCE = int(os.getenv('SIF_PATIENCE', '3'))
    ZERO_ROW_EPOCHS = int(os.getenv('SIF_ZERO_ROW_EPOCHS', '1'))
    RESEED_DEAD_CODES = _env_bool('SIF_RESEED_DEAD_CODES', 'true')
    SHARDS = int(os.getenv('SIF_SHARDS', '1'))
    DTYPE = os.getenv('SIF_DTYPE', 'float32')
    SEED = int(os.getenv('SIF_SEED', '7'))

    # Données synthétiques
    N_USERS = int(os.getenv('SIF_N_USERS', '1000'))
    N_ITEMS = int(os.getenv('SIF_N_ITEMS', '500'))
    N_IMPRESSIONS = int(os.getenv('SIF_N_IMPRESSIONS', '100000'))
    SIGNAL_STRENGTH = float(os.getenv('SIF_SIGNAL_STRENGTH', '1.0'))

    # Évaluation stratifiée par longueur d'historique
    STRATA_EDGES = os.getenv('SIF_STRATA_EDGES', '10,100,500')


class ReferenceConfig(Config):
    """Configuration de référence à l'échelle industrielle"""


class DeskConfig(Config):
    """Configuration réduite pour un poste de travail (CPU)"""
    N_HEADS = int(os.getenv('SIF_N_HEADS', '4'))
    CODEBOOK_SIZE = int(os.getenv('SIF_CODEBOOK_SIZE', '64'))
    GRANULARITY = int(os.getenv('SIF_GRANULARITY', '4'))
    SEQ_LEN = int(os.getenv('SIF_SEQ_LEN', '32'))
    BATCH_SIZE = int(os.getenv('SIF_BATCH_SIZE', '256'))
    MAX_EPOCHS = int(os.getenv('SIF_MAX_EPOCHS', '8'))
    DENSE_DIM = int(os.getenv('SIF_DENSE_DIM', '64'))
    KEY_FIELDS = int(os.getenv('SIF_KEY_FIELDS', '4'))
    STRATA_EDGES = os.getenv('SIF_STRATA_EDGES', '2,8,16')


class TestingConfig(Config):
    """Configuration minuscule pour la vérification des gradients (float64)"""
    GRANULARITY = 2
    SUB_TOKEN_DIM = 4
    RVQ_LEVELS = 2
    CODEBOOK_SIZE = 4
    N_BLOCKS = 1
    N_HEADS = 2
    SEQ_LEN = 4
    DENSE_DIM = 8
    KEY_FIELDS = 2
    BATCH_SIZE = 8
    MAX_EPOCHS = 2
    DTYPE = 'float64'
    N_USERS = 12
    N_ITEMS = 10
    N_IMPRESSIONS = 240
    STRATA_EDGES = '1,2,3'


# Dictionnaire de configurations
config = {
    'reference': ReferenceConfig,
    'desk': DeskConfig,
    'testing': TestingConfig,
    'default': DeskConfig
}


SCHEMA_OVERRIDES = ('granularity', 'sub_token_dim', 'rvq_levels', 'codebook_size')


@dataclass
class RunConfig:
    """
    Configuration effective d'une exécution (profil < fichier < flags)

    Les noms sont ceux des clés du fichier de configuration (KEY=VALUE).
    """
    variant: str = 'full'
    seed: int = 7
    schema: str | None = None
    data: str | None = None
    out: str = 'runs/default'
    granularity: int | None = None
    sub_token_dim: int | None = None
    rvq_levels: int | None = None
    codebook_size: int | None = None
    commitment: float = 0.25
    n_blocks: int = 4
    n_heads: int = 8
    seq_len: int = 1000
    dense_dim: int = 512
    key_fields: int = 24
    beta_vq: float = 1.0
    gamma_align: float = 0.25
    token_weight: float = 1.0
    codebook_loss: bool = True
    aux_route: bool = True
    sequence_route: bool = True
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    batch_size: int = 4096
    max_epochs: int = 20
    max_batches_per_epoch: int = 0
    patience: int = 3
    zero_row_epochs: int = 1
    reseed_dead_codes: bool = True
    shards: int = 1
    dtype: str = 'float32'
    deterministic: bool = True
    strata_edges: str = '10,100,500'

    @classmethod
    def from_profile(cls, name: str | None = None) -> 'RunConfig':
        """
        Construit la configuration par défaut d'un profil

        Args:
            name: reference, desk, testing (None = SIF_ENV ou 'default')

        Returns:
            RunConfig initialisé depuis la classe de configuration
        """
        if name is None:
            name = os.getenv('SIF_ENV', 'default')
        profile = config[name]
        values = {}
        for f in fields(cls):
            attr = f.name.upper()
            # les hyperparamètres HGAQ viennent du fichier de schéma sauf surcharge explicite
            if f.name in SCHEMA_OVERRIDES:
                continue
            if hasattr(profile, attr):
                values[f.name] = getattr(profile, attr)
        return cls(**values)

    def merged(self, overrides: dict) -> 'RunConfig':
        """Retourne une copie où les valeurs non nulles de overrides l'emportent"""
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)

    @property
    def strata(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.strata_edges.split(',') if x.strip())

    def to_dict(self):
        return asdict(self)
