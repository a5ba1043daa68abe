"""
Modèles de données du pipeline SIF

Types du domaine partagés par tous les modules: schéma de features,
échantillons bruts, Token Samples et rapports.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from exceptions import SchemaError


class GroupEnum(enum.Enum):
    """Groupes sémantiques standards, dans l'ordre de sérialisation"""
    USER = "user"
    ITEM = "item"
    CTX = "ctx"
    CROSS = "cross"


class FieldKindEnum(enum.Enum):
    """Nature d'un champ brut"""
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"


class VariantEnum(enum.Enum):
    """Variantes entraînables (représentation de l'historique et stratégie d'attention)"""
    FULL = "full"
    ITEM_ID_ONLY = "item_id_only"
    ITEM_PLUS_KEY = "item_plus_key"
    DENSE_RAW = "dense_raw"
    FLAT_ATTN = "flat_attn"
    POOLED = "pooled"

    @property
    def uses_tokenizer(self) -> bool:
        """Vrai si l'historique passe par le quantificateur HGAQ"""
        return self in (VariantEnum.FULL, VariantEnum.FLAT_ATTN, VariantEnum.POOLED)


STANDARD_GROUPS = tuple(g.value for g in GroupEnum)


@dataclass(frozen=True)
class FieldSpec:
    """
    Déclaration d'un champ brut

    Attributs:
        name: Identifiant du champ
        group: Groupe sémantique (user, item, ctx, cross ou groupe singleton dédié)
        kind: Catégoriel ou numérique
        cardinality: Nombre de modalités (catégoriel uniquement)
        embed_dim: Largeur d'embedding brute d_e
    """
    name: str
    group: str
    kind: FieldKindEnum
    cardinality: int | None = None
    embed_dim: int = 8

    def __post_init__(self):
        if not self.name:
            raise SchemaError("Un champ doit avoir un nom")
        if self.kind is FieldKindEnum.CATEGORICAL:
            if self.cardinality is None or self.cardinality < 2:
                raise SchemaError(
                    f"Champ '{self.name}': cardinalité >= 2 requise (reçu {self.cardinality})"
                )
        elif self.cardinality is not None:
            raise SchemaError(f"Champ numérique '{self.name}': pas de cardinalité attendue")
        if self.embed_dim < 1:
            raise SchemaError(f"Champ '{self.name}': embed_dim doit être >= 1")

    @property
    def is_categorical(self) -> bool:
        return self.kind is FieldKindEnum.CATEGORICAL

    def to_dict(self):
        """Convertit le champ en dictionnaire (format du fichier de schéma)"""
        return {
            'name': self.name,
            'group': self.group,
            'kind': self.kind.value,
            'cardinality': self.cardinality,
            'embed_dim': self.embed_dim
        }


@dataclass(frozen=True)
class FeatureSchema:
    """
    Schéma complet: champs ordonnés et hyperparamètres HGAQ

    Attributs:
        fields: Champs dans l'ordre de déclaration
        granularity: B, nombre cible de champs par sous-token
        sub_token_dim: d_0
        rvq_levels: M, niveaux de quantification résiduelle
        codebook_size: V, codes par niveau
        groups: Groupes déclarés explicitement (None = déduits des champs)
    """
    fields: tuple[FieldSpec, ...]
    granularity: int = 32
    sub_token_dim: int = 16
    rvq_levels: int = 3
    codebook_size: int = 256
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.fields:
            raise SchemaError("Le schéma ne contient aucun champ")
        names = [f.name for f in self.fields]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise SchemaError(f"Champs dupliqués: {', '.join(duplicates)}")
        if self.sub_token_dim < 1:
            raise SchemaError("sub_token_dim doit être >= 1")
        if self.rvq_levels < 1:
            raise SchemaError("rvq_levels doit être >= 1")
        bits = math.log2(self.codebook_size) if self.codebook_size >= 1 else -1
        if bits < 0 or not bits.is_integer() or bits > 16:
            raise SchemaError(
                f"codebook_size doit être une puissance de 2 avec log2(V) <= 16 (reçu {self.codebook_size})"
            )

    @property
    def bits_per_index(self) -> int:
        return int(math.log2(self.codebook_size))

    @property
    def group_names(self) -> tuple[str, ...]:
        """Groupes ordonnés: les quatre groupes standards puis les singletons par ordre d'apparition"""
        declared = self.groups if self.groups is not None else tuple(
            dict.fromkeys(f.group for f in self.fields)
        )
        standard = [g for g in STANDARD_GROUPS if g in declared]
        extra = [g for g in declared if g not in STANDARD_GROUPS]
        return tuple(standard + extra)

    def field_index(self, name: str) -> int:
        for i, spec in enumerate(self.fields):
            if spec.name == name:
                return i
        raise KeyError(name)

    def to_dict(self):
        """Convertit le schéma en dictionnaire (format du fichier de schéma)"""
        data = {
            'fields': [f.to_dict() for f in self.fields],
            'granularity': self.granularity,
            'sub_token_dim': self.sub_token_dim,
            'rvq_levels': self.rvq_levels,
            'codebook_size': self.codebook_size
        }
        if self.groups is not None:
            data['groups'] = list(self.groups)
        return data


@dataclass(frozen=True)
class SubTokenSlot:
    """
    Slot (g, k): k-ème sous-ensemble de champs du groupe g

    Attributs:
        group: Nom du groupe
        index_in_group: k, indice 0-based dans le groupe
        field_indices: Indices des champs du sous-ensemble dans FeatureSchema.fields
        raw_width: Somme des embed_dim du sous-ensemble (largeur d'entrée de W_proj)
    """
    group: str
    index_in_group: int
    field_indices: tuple[int, ...]
    raw_width: int


@dataclass(frozen=True)
class RawSample:
    """Instantané complet d'une impression et son label"""
    sample_id: int
    user_id: int
    item_id: int
    timestamp: int
    field_values: tuple[float, ...]
    label: int

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TokenSample:
    """Indices T x M produits par HGAQ pour un échantillon"""
    indices: np.ndarray

    def __post_init__(self):
        if self.indices.ndim != 2:
            raise ValueError(f"TokenSample attend un tableau (T, M), reçu {self.indices.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.indices.shape)

    def __eq__(self, other):
        if not isinstance(other, TokenSample):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash(self.indices.tobytes())


@dataclass
class LossBreakdown:
    """
    Décomposition de la perte d'un pas d'entraînement

    total = bce + beta * vq + gamma * align + token_weight * token
    """
    bce: float
    vq: float
    align: float
    token: float = 0.0
    beta: float = 1.0
    gamma: float = 0.25
    token_weight: float = 1.0

    @property
    def total(self) -> float:
        return self.bce + self.beta * self.vq + self.gamma * self.align + self.token_weight * self.token

    def to_dict(self):
        data = asdict(self)
        data['total'] = self.total
        return data


@dataclass
class MetricReport:
    """Rapport d'évaluation d'un split"""
    auc: float
    gauc: float
    n_scored: int
    n_groups_used: int
    flops_per_example: int
    logloss: float | None = None
    n_groups_skipped: int = 0
    params: dict = field(default_factory=dict)
    strata: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)
