"""
Gel des stop-gradients et des indices de quantification

En mode normal, stop_gradient() est un simple detach(). Pour la vérification
par différences finies, une première passe enregistre chaque valeur détachée
et chaque jeu d'indices (mode 'record'), puis les passes perturbées les
rejouent (mode 'replay'): la perte devient une fonction lisse des paramètres,
exactement celle que différencie l'autograd.
"""
import logging
from contextlib import contextmanager

import torch

logger = logging.getLogger(__name__)


class FreezeRegistry:
    """
    Valeurs gelées, indexées par site d'appel

    Attributs:
        mode: 'record' ou 'replay'
        values: {clé: tenseur détaché}
        indices: {clé: tenseur d'indices}
        flipped: Clés dont l'argmin frais diffère de l'argmin enregistré
    """

    def __init__(self, mode: str = 'record'):
        if mode not in ('record', 'replay'):
            raise ValueError(f"Mode de gel inconnu: {mode}")
        self.mode = mode
        self.values = {}
        self.indices = {}
        self.flipped = set()

    def replaying(self) -> 'FreezeRegistry':
        """Bascule en rejeu (les valeurs enregistrées sont conservées)"""
        self.mode = 'replay'
        self.flipped = set()
        return self

    def _lookup(self, store, key):
        if key not in store:
            raise KeyError(f"Aucune valeur gelée pour le site '{key}'")
        return store[key]


_active: list[FreezeRegistry] = []


@contextmanager
def freezing(registry: FreezeRegistry):
    """Active un registre pour la durée du bloc"""
    _active.append(registry)
    try:
        yield registry
    finally:
        _active.pop()


def current() -> FreezeRegistry | None:
    return _active[-1] if _active else None


def stop_gradient(x: torch.Tensor, key: str) -> torch.Tensor:
    """sg(x): valeur conservée, gradient nul"""
    registry = current()
    if registry is None:
        return x.detach()
    if registry.mode == 'record':
        registry.values[key] = x.detach().clone()
        return registry.values[key]
    return registry._lookup(registry.values, key)


def frozen_indices(fresh: torch.Tensor, key: str) -> torch.Tensor:
    """
    Indices d'argmin, éventuellement rejoués

    Args:
        fresh: Indices calculés sur l'état courant
        key: Site d'appel

    Returns:
        Indices à utiliser pour la suite du calcul
    """
    registry = current()
    if registry is None:
        return fresh
    if registry.mode == 'record':
        registry.indices[key] = fresh.clone()
        return fresh
    stored = registry._lookup(registry.indices, key)
    if not torch.equal(stored, fresh):
        registry.flipped.add(key)
    return stored
