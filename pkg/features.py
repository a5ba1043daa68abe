"""
Schéma de features: partition en sous-tokens et comptabilité des bits

K_g = ceil(|F_g| / B) sous-tokens par groupe, T = somme des K_g.
"""
import hashlib
import json
import logging
import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
from marshmallow import ValidationError

from exceptions import SchemaError
from models import FeatureSchema, FieldSpec, FieldKindEnum, STANDARD_GROUPS, SubTokenSlot
from schemas import feature_schema_file_schema

logger = logging.getLogger(__name__)


@lru_cache(maxsize=64)
def derive_partition(schema: FeatureSchema) -> tuple[SubTokenSlot, ...]:
    """
    Découpe chaque groupe en K_g sous-ensembles contigus de tailles quasi égales

    Args:
        schema: Schéma validé

    Returns:
        Les T slots, groupe par groupe puis k croissant

    Raises:
        SchemaError: B <= 0, groupe déclaré sans champ, groupe singleton à plusieurs champs
    """
    if schema.granularity <= 0:
        raise SchemaError(f"La granularité B doit être > 0 (reçu {schema.granularity})")

    slots = []
    for group in schema.group_names:
        members = [i for i, f in enumerate(schema.fields) if f.group == group]
        if not members:
            raise SchemaError(f"Le groupe '{group}' ne contient aucun champ")
        if group not in STANDARD_GROUPS and len(members) != 1:
            raise SchemaError(
                f"Le groupe dédié '{group}' doit contenir exactement un champ ({len(members)} trouvés)"
            )

        n_slots = math.ceil(len(members) / schema.granularity)
        # np.array_split: tailles qui diffèrent d'au plus 1, ordre de déclaration conservé
        for k, chunk in enumerate(np.array_split(np.asarray(members), n_slots)):
            indices = tuple(int(i) for i in chunk)
            width = sum(schema.fields[i].embed_dim for i in indices)
            slots.append(SubTokenSlot(group=group, index_in_group=k, field_indices=indices, raw_width=width))

    undeclared = {f.group for f in schema.fields} - set(schema.group_names)
    if undeclared:
        raise SchemaError(f"Champs rattachés à des groupes non déclarés: {', '.join(sorted(undeclared))}")
    return tuple(slots)


def group_counts(schema: FeatureSchema) -> dict[str, int]:
    """Retourne K_g pour chaque groupe, dans l'ordre de sérialisation"""
    counts = {}
    for slot in derive_partition(schema):
        counts[slot.group] = counts.get(slot.group, 0) + 1
    return counts


def n_slots(schema: FeatureSchema) -> int:
    """T, le nombre total de sous-tokens"""
    return len(derive_partition(schema))


def token_bits(schema: FeatureSchema) -> int:
    """
    Taille d'un Token Sample en bits: T x M x log2(V)

    Args:
        schema: Schéma validé

    Returns:
        Nombre de bits par échantillon
    """
    return n_slots(schema) * schema.rvq_levels * schema.bits_per_index


def schema_hash(schema: FeatureSchema) -> int:
    """Empreinte u64 stable du schéma (JSON canonique)"""
    canonical = json.dumps(schema.to_dict(), sort_keys=True, separators=(',', ':'))
    digest = hashlib.blake2b(canonical.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def load_schema(path, **overrides) -> FeatureSchema:
    """
    Charge un fichier de schéma JSON (parsing strict)

    Args:
        path: Chemin du fichier
        overrides: granularity, sub_token_dim, rvq_levels, codebook_size (None = ignoré)

    Returns:
        FeatureSchema validé

    Raises:
        SchemaError: clé inconnue, valeur invalide, JSON illisible
    """
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            raw = json.load(fh)
        schema = feature_schema_file_schema.load(raw)
    except ValidationError as e:
        raise SchemaError(f"Fichier de schéma invalide ({path}): {e.messages}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"JSON invalide dans {path}: {str(e)}") from e

    schema = apply_overrides(schema, **overrides)
    derive_partition(schema)
    logger.info(f"Schéma chargé: {len(schema.fields)} champs, T={n_slots(schema)}")
    return schema


def apply_overrides(schema: FeatureSchema, **overrides) -> FeatureSchema:
    """Remplace les hyperparamètres HGAQ fournis (valeurs None ignorées)"""
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(schema, **clean) if clean else schema


def save_schema(schema: FeatureSchema, path) -> None:
    """Écrit le schéma au format du fichier de schéma"""
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(schema.to_dict(), fh, indent=2)


def _categorical(name, group, cardinality, embed_dim=8):
    return FieldSpec(name=name, group=group, kind=FieldKindEnum.CATEGORICAL,
                     cardinality=cardinality, embed_dim=embed_dim)


def _numeric(name, group, embed_dim=8):
    return FieldSpec(name=name, group=group, kind=FieldKindEnum.NUMERIC, embed_dim=embed_dim)


def desk_schema(n_items: int = 500, granularity: int = 4, sub_token_dim: int = 16,
                rvq_levels: int = 3, codebook_size: int = 64, embed_dim: int = 8) -> FeatureSchema:
    """
    Schéma synthétique de démonstration (4 groupes + identifiant d'item dédié)

    Args:
        n_items: Cardinalité du champ item_id
        granularity: B

    Returns:
        FeatureSchema
    """
    fields = (
        _categorical('user_age_bucket', 'user', 8, embed_dim),
        _categorical('user_gender', 'user', 3, embed_dim),
        _categorical('user_city_tier', 'user', 5, embed_dim),
        _categorical('user_level', 'user', 6, embed_dim),
        _numeric('user_activity', 'user', embed_dim),
        _numeric('user_spend', 'user', embed_dim),
        _categorical('item_id', 'item_id', max(n_items, 2), embed_dim),
        _categorical('item_category', 'item', 12, embed_dim),
        _categorical('item_brand', 'item', 20, embed_dim),
        _categorical('item_price_bucket', 'item', 10, embed_dim),
        _numeric('item_rating', 'item', embed_dim),
        _numeric('item_popularity', 'item', embed_dim),
        _categorical('ctx_hour_bucket', 'ctx', 6, embed_dim),
        _categorical('ctx_weekday', 'ctx', 7, embed_dim),
        _categorical('ctx_coupon', 'ctx', 2, embed_dim),
        _categorical('ctx_weather', 'ctx', 4, embed_dim),
        _numeric('ctx_distance', 'ctx', embed_dim),
        _categorical('cross_user_category', 'cross', 16, embed_dim),
        _categorical('cross_hour_category', 'cross', 16, embed_dim),
        _numeric('cross_affinity', 'cross', embed_dim),
    )
    return FeatureSchema(fields=fields, granularity=granularity, sub_token_dim=sub_token_dim,
                         rvq_levels=rvq_levels, codebook_size=codebook_size)


def tiny_schema(n_items: int = 10) -> FeatureSchema:
    """Schéma minuscule (T=3, d_0=4, M=2, V=4) pour la vérification des gradients"""
    fields = (
        _categorical('user_segment', 'user', 3, 2),
        _numeric('user_activity', 'user', 2),
        _categorical('item_category', 'item', 4, 2),
        _numeric('item_price', 'item', 2),
        _categorical('ctx_hour_bucket', 'ctx', 3, 2),
        _numeric('ctx_distance', 'ctx', 2),
    )
    return FeatureSchema(fields=fields, granularity=2, sub_token_dim=4, rvq_levels=2, codebook_size=4)


def synthetic_schema(group_sizes: dict[str, int], granularity: int = 32, sub_token_dim: int = 16,
                     rvq_levels: int = 3, codebook_size: int = 256, embed_dim: int = 8) -> FeatureSchema:
    """
    Schéma générique de |F_g| champs numériques par groupe (tests de partition, rapports)

    Args:
        group_sizes: {groupe: nombre de champs}
    """
    fields = tuple(
        _numeric(f"{group}_{i}", group, embed_dim)
        for group, size in group_sizes.items()
        for i in range(size)
    )
    return FeatureSchema(fields=fields, granularity=granularity, sub_token_dim=sub_token_dim,
                         rvq_levels=rvq_levels, codebook_size=codebook_size)


REFERENCE_GROUP_SIZES = {'user': 130, 'item': 200, 'ctx': 130, 'cross': 135}
REFERENCE_SINGLETONS = ('item_id', 'shop_id', 'brand_id', 'category_id', 'creative_id')


def reference_schema() -> FeatureSchema:
    """
    Schéma de référence à l'échelle industrielle: 600 champs, d_e=8, B=32, M=3, V=256

    Quatre groupes standards (K = 5, 7, 5, 5) et cinq identifiants dédiés: T = 27, 648 bits par échantillon.
    """
    base = synthetic_schema(REFERENCE_GROUP_SIZES, granularity=32, sub_token_dim=16, rvq_levels=3,
                            codebook_size=256, embed_dim=8)
    singletons = tuple(_categorical(name, name, 1 << 20, 8) for name in REFERENCE_SINGLETONS)
    return replace(base, fields=base.fields + singletons)
