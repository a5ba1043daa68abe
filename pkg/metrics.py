"""
Métriques d'évaluation et modèle de coût

AUC, GAUC pondérée par impressions, LogLoss, évaluation stratifiée par
longueur d'historique, comptage de paramètres et estimation analytique
des FLOPs des SIF Blocks (1 multiplication-accumulation = 2 FLOPs;
softmax et LayerNorm exclus).
"""
import logging

import numpy as np
import torch
from sklearn.metrics import log_loss, roc_auc_score
from torch.utils.flop_counter import FlopCounterMode

from exceptions import UndefinedMetricError
from models import VariantEnum

logger = logging.getLogger(__name__)


def _both_classes(labels: np.ndarray) -> bool:
    positives = int(labels.sum())
    return 0 < positives < labels.shape[0]


def auc(scores, labels) -> float:
    """
    Probabilité qu'un positif soit mieux classé qu'un négatif (égalités = 0.5)

    Raises:
        UndefinedMetricError: une seule classe présente
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if not _both_classes(labels):
        raise UndefinedMetricError("AUC non définie: au moins un positif et un négatif sont requis")
    return float(roc_auc_score(labels, scores))


def gauc_details(scores, labels, group_ids) -> tuple[float, int, int]:
    """
    GAUC et statistiques de groupes

    Returns:
        (gauc, groupes utilisés, groupes ignorés car mono-classe)

    Raises:
        UndefinedMetricError: aucun groupe ne contient les deux classes
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    group_ids = np.asarray(group_ids)

    order = np.argsort(group_ids, kind='stable')
    _, starts = np.unique(group_ids[order], return_index=True)
    weighted, weight, used, skipped = 0.0, 0, 0, 0
    for chunk in np.split(order, starts[1:]):
        group_labels = labels[chunk]
        if not _both_classes(group_labels):
            skipped += 1
            continue
        weighted += chunk.size * roc_auc_score(group_labels, scores[chunk])
        weight += chunk.size
        used += 1

    if used == 0:
        raise UndefinedMetricError("GAUC non définie: aucun groupe ne contient les deux classes")
    if skipped:
        logger.debug(f"GAUC: {skipped} groupes mono-classe ignorés")
    return weighted / weight, used, skipped


def gauc(scores, labels, group_ids) -> float:
    """Moyenne des AUC par groupe, pondérée par le nombre d'impressions"""
    return gauc_details(scores, labels, group_ids)[0]


def logloss(scores, labels) -> float:
    return float(log_loss(np.asarray(labels).astype(np.int64), np.asarray(scores, dtype=np.float64),
                          labels=[0, 1]))


def stratified(scores, labels, group_ids, lengths, edges) -> list[dict]:
    """
    AUC et GAUC par tranche de longueur d'historique

    Args:
        edges: Bornes croissantes, ex. (10, 100, 500) -> l<10, 10<=l<100, 100<=l<500, l>=500

    Returns:
        Une entrée par tranche; auc/gauc à None si non définies
    """
    scores, labels = np.asarray(scores), np.asarray(labels)
    group_ids, lengths = np.asarray(group_ids), np.asarray(lengths)
    bounds = [0, *edges, None]
    strata = []
    for low, high in zip(bounds[:-1], bounds[1:]):
        mask = lengths >= low if high is None else (lengths >= low) & (lengths < high)
        entry = {'low': low, 'high': high, 'n': int(mask.sum()), 'auc': None, 'gauc': None}
        if mask.any():
            try:
                entry['auc'] = auc(scores[mask], labels[mask])
                entry['gauc'] = gauc(scores[mask], labels[mask], group_ids[mask])
            except UndefinedMetricError:
                pass
        strata.append(entry)
    return strata


def count_parameters(module: torch.nn.Module) -> int:
    return int(sum(p.numel() for p in module.parameters()))


def attention_macs(seq_len: int, n_slots: int, dim: int, variant=VariantEnum.FULL) -> int:
    """
    Multiplications-accumulations des produits d'attention d'un bloc (scores + pondération des valeurs)

    factored: 2·T²·(L+1)·d_0 + 2·(L+1)²·T·d_0
    flat: 2·((L+1)·T)²·d_0
    pooled: 2·(L+1)²·d_0
    """
    variant = VariantEnum(variant)
    rows = seq_len + 1
    if variant is VariantEnum.FLAT_ATTN:
        return 2 * (rows * n_slots) ** 2 * dim
    if variant is VariantEnum.POOLED:
        return 2 * rows ** 2 * dim
    sample = 2 * rows ** 2 * n_slots * dim
    if variant is VariantEnum.ITEM_ID_ONLY:
        return sample
    return 2 * n_slots ** 2 * rows * dim + sample


def block_macs(seq_len: int, n_slots: int, dim: int, variant=VariantEnum.FULL) -> int:
    """
    MACs d'un SIF Block: attention + projections Q/K/V/sortie (4·d_0² par entrée et par mixer)
    + FFN d_0 -> 4d_0 -> d_0 (8·d_0² par entrée)
    """
    variant = VariantEnum(variant)
    rows = seq_len + 1
    entries = rows if variant is VariantEnum.POOLED else rows * n_slots
    mixers = 2 if variant in (VariantEnum.FULL, VariantEnum.ITEM_PLUS_KEY, VariantEnum.DENSE_RAW) else 1
    projections = 4 * mixers * entries * dim ** 2
    ffn = 8 * entries * dim ** 2
    return attention_macs(seq_len, n_slots, dim, variant) + projections + ffn


def flops_estimate(seq_len: int, n_slots: int, dim: int, n_blocks: int, n_heads: int = 8,
                   variant=VariantEnum.FULL) -> int:
    """
    FLOPs par exemple des N blocs (exactement linéaire en N)

    Le nombre de têtes ne change pas le coût: chaque tête travaille sur d_0 / têtes dimensions.

    Args:
        seq_len: L
        n_slots: T
        dim: d_0
        n_blocks: N
        variant: full, flat_attn, pooled, ...

    Returns:
        2 x MACs
    """
    if min(n_slots, dim, n_blocks, n_heads) < 1 or seq_len < 0:
        raise ValueError("Dimensions positives attendues pour l'estimation des FLOPs")
    return 2 * n_blocks * block_macs(seq_len, n_slots, dim, variant)


def flat_to_factored_ratio(seq_len: int, n_slots: int) -> float:
    """((L+1)·T)² / ((L+1)²·T + (L+1)·T²)"""
    rows = seq_len + 1
    return (rows * n_slots) ** 2 / (rows ** 2 * n_slots + rows * n_slots ** 2)


@torch.no_grad()
def instrumented_flops(mixer, hidden: torch.Tensor, valid: torch.Tensor) -> dict:
    """
    FLOPs mesurés sur une passe réelle du backbone

    Returns:
        {'total': FLOPs de toutes les opérations matricielles, 'attention': FLOPs des bmm d'attention},
        par exemple du lot
    """
    with FlopCounterMode(display=False) as counter:
        mixer(hidden, valid)
    per_op = counter.get_flop_counts().get('Global', {})
    attention = sum(count for op, count in per_op.items() if 'bmm' in str(op))
    batch = hidden.shape[0]
    return {'total': counter.get_total_flops() // batch, 'attention': attention // batch}
