"""
Outils partagés par les commandes: résolution de la configuration et du schéma
"""
import logging
from pathlib import Path

import click
from dotenv import dotenv_values
from marshmallow import ValidationError

from config import RunConfig
from exceptions import SchemaError
from features import load_schema
from schemas import run_config_schema

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / 'data'
DEFAULT_SCHEMA = DATA_DIR / 'desk_schema.json'

VARIANT_CHOICE = click.Choice(['full', 'item_id_only', 'item_plus_key', 'dense_raw', 'flat_attn', 'pooled'])


def read_config_file(path) -> dict:
    """
    Lit un fichier KEY=VALUE et le valide (clés inconnues refusées)

    Raises:
        SchemaError: clé inconnue ou valeur invalide
    """
    raw = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
    try:
        return run_config_schema.load(raw)
    except ValidationError as e:
        raise SchemaError(f"Fichier de configuration invalide ({path}): {e.messages}") from e


def resolve_settings(profile: str | None, config_path, flags: dict) -> RunConfig:
    """
    Configuration effective: profil < fichier de configuration < flags

    Args:
        profile: reference, desk, testing (None = SIF_ENV)
        config_path: Fichier KEY=VALUE optionnel
        flags: Valeurs des options (None = non fournie)
    """
    settings = RunConfig.from_profile(profile)
    if config_path:
        settings = settings.merged(read_config_file(config_path))
    try:
        validated = run_config_schema.load({k: v for k, v in flags.items() if v is not None})
    except ValidationError as e:
        raise SchemaError(f"Options invalides: {e.messages}") from e
    return settings.merged(validated)


def resolve_schema(settings: RunConfig):
    """Charge le schéma de la run avec les surcharges HGAQ éventuelles"""
    path = settings.schema or DEFAULT_SCHEMA
    return load_schema(path, granularity=settings.granularity, sub_token_dim=settings.sub_token_dim,
                       rvq_levels=settings.rvq_levels, codebook_size=settings.codebook_size)


def config_options(func):
    """Options communes aux commandes qui entraînent"""
    options = [
        click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     help="Fichier KEY=VALUE (clés: noms des hyperparamètres en minuscules)"),
        click.option('--profile', type=click.Choice(['reference', 'desk', 'testing']), default=None,
                     help="Profil de valeurs par défaut (défaut: SIF_ENV, sinon desk)"),
        click.option('--schema', type=click.Path(exists=True, dir_okay=False), default=None,
                     help="Fichier de schéma JSON (défaut: data/desk_schema.json)"),
        click.option('--data', type=click.Path(exists=True, dir_okay=False), default=None,
                     help="Journal d'impressions produit par gen-data"),
        click.option('--out', type=click.Path(file_okay=False), default=None, help="Répertoire de run"),
        click.option('--seed', type=int, default=None, help="Graine (défaut 7)"),
        click.option('--granularity', type=int, default=None, help="B, champs par sous-token (défaut 32)"),
        click.option('--sub-token-dim', type=int, default=None, help="d_0 (défaut 16)"),
        click.option('--rvq-levels', type=int, default=None, help="M (défaut 3)"),
        click.option('--codebook-size', type=int, default=None, help="V (défaut 256)"),
        click.option('--n-blocks', type=int, default=None, help="N, nombre de SIF Blocks (défaut 4)"),
        click.option('--n-heads', type=int, default=None, help="Têtes d'attention (défaut 8)"),
        click.option('--seq-len', type=int, default=None, help="L, longueur d'historique (défaut 1000)"),
        click.option('--lr', type=float, default=None, help="Taux d'apprentissage Adam (défaut 1e-3)"),
        click.option('--batch-size', type=int, default=None, help="Taille de lot (défaut 4096)"),
        click.option('--max-epochs', type=int, default=None, help="Époques maximales (défaut 20)"),
        click.option('--max-batches-per-epoch', type=int, default=None, help="Budget de lots par époque (0 = tous)"),
        click.option('--beta-vq', type=float, default=None, help="Poids de L_VQ (défaut 1.0)"),
        click.option('--gamma-align', type=float, default=None, help="Poids de L_align (défaut 0.25)"),
        click.option('--dtype', type=click.Choice(['float32', 'float64']), default=None, help="Précision"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def pop_flags(kwargs: dict) -> tuple[str | None, str | None, dict]:
    """Sépare profil et fichier de configuration des surcharges"""
    profile = kwargs.pop('profile', None)
    config_path = kwargs.pop('config_path', None)
    return profile, config_path, kwargs
