"""
Commande de génération du journal synthétique
"""
import logging

import click

from datagen import generate_log, save_log
from features import load_schema
from .common import DEFAULT_SCHEMA

logger = logging.getLogger(__name__)


@click.command('gen-data')
@click.option('--users', type=click.IntRange(min=1), required=True, help="Nombre d'utilisateurs")
@click.option('--items', type=click.IntRange(min=1), required=True, help="Nombre d'items")
@click.option('--impressions', type=click.IntRange(min=1), required=True, help="Nombre d'impressions")
@click.option('--seed', type=click.IntRange(min=0), required=True, help="Graine 64 bits")
@click.option('--signal-strength', type=click.FloatRange(0.0, 1.0), default=1.0, show_default=True,
              help="Poids du signal d'historique planté (0 = absent)")
@click.option('--schema', 'schema_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fichier de schéma JSON (défaut: data/desk_schema.json)")
@click.option('--out', type=click.Path(dir_okay=False), default='impressions.sifl', show_default=True,
              help="Fichier journal à écrire")
def gen_data_cmd(users, items, impressions, seed, signal_strength, schema_path, out):
    """
    Génère un journal d'impressions reproductible (bit à bit pour une graine donnée)
    """
    schema = load_schema(schema_path or DEFAULT_SCHEMA)
    log = generate_log(schema, n_users=users, n_items=items, n_impressions=impressions, seed=seed,
                       signal_strength=signal_strength)
    save_log(log, out)
    click.echo(f"{len(log)} impressions écrites dans {out} (taux de positifs {log.labels.mean():.4f})")
