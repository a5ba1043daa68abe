"""
Commandes d'étude: balayages, ablations et rapport de compression
"""
import logging
from pathlib import Path

import click

from datagen import load_log
from experiments import SWEEP_AXES, ablate, sweep
from features import load_schema, reference_schema
from models import VariantEnum
from tokenstore import compression_report
from utils.rundir import attach_file_log, detach_file_log, prepare_run_dir, write_table
from .common import config_options, pop_flags, resolve_schema, resolve_settings

logger = logging.getLogger(__name__)


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter(f"Liste d'entiers séparés par des virgules attendue: {value}")


def _prepare(kwargs):
    profile, config_path, flags = pop_flags(kwargs)
    settings = resolve_settings(profile, config_path, flags)
    if not settings.data:
        raise click.UsageError("Journal requis: --data ou clé data du fichier de configuration")
    schema = resolve_schema(settings)
    return settings, schema, load_log(settings.data, schema)


@click.command('sweep')
@click.option('--axis', type=click.Choice(list(SWEEP_AXES)), required=True,
              help="B (granularité), N (profondeur) ou L (longueur d'historique)")
@click.option('--values', callback=_int_list, required=True, help="Valeurs séparées par des virgules, ex. 8,16,32,64")
@click.option('--variant', type=click.Choice([v.value for v in VariantEnum]), default=None)
@config_options
def sweep_cmd(axis, values, **kwargs):
    """
    Une run par valeur (graine et budget communs); table sweep.csv et un JSON par point
    """
    settings, schema, log = _prepare(kwargs)
    out_dir = prepare_run_dir(settings.out, settings)
    handler = attach_file_log(out_dir)
    try:
        rows = sweep(axis, values, settings, log, schema, out_dir)
    finally:
        detach_file_log(handler)
    failed = sum(1 for row in rows if row['status'] != 'ok')
    click.echo(f"{len(rows)} points ({failed} en échec), table: {out_dir / 'sweep.csv'}")


@click.command('ablate')
@click.option('--variants', default=','.join(v.value for v in VariantEnum), show_default=True,
              help="Variantes séparées par des virgules")
@click.option('--seeds', callback=_int_list, default='1,2,3', show_default=True, help="Graines")
@config_options
def ablate_cmd(variants, seeds, **kwargs):
    """
    Toutes les variantes sur plusieurs graines à budget égal, avec test t apparié contre full
    """
    try:
        variants = [VariantEnum(v.strip()).value for v in variants.split(',') if v.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint='--variants')
    settings, schema, log = _prepare(kwargs)
    out_dir = prepare_run_dir(settings.out, settings)
    handler = attach_file_log(out_dir)
    try:
        rows = ablate(variants, seeds, settings, log, schema, out_dir)
    finally:
        detach_file_log(handler)
    for row in rows:
        if not row['n_seeds']:
            click.echo(f"{row['variant']:<14} toutes les graines en échec")
            continue
        click.echo(f"{row['variant']:<14} AUC {row['auc_mean']:.4f} ± {row['auc_std']:.4f}  "
                   f"GAUC {row['gauc_mean']:.4f} ± {row['gauc_std']:.4f}")


@click.command('report')
@click.option('--variant', type=click.Choice(['all'] + [v.value for v in VariantEnum]), default='all',
              show_default=True)
@click.option('--schema', 'schema_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Schéma (défaut: schéma de référence à 600 champs)")
@click.option('--key-fields', type=click.IntRange(min=1), default=24, show_default=True)
@click.option('--dense-dim', type=click.IntRange(min=1), default=512, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), default=None, help="Table CSV à écrire")
def report_cmd(variant, schema_path, key_fields, dense_dim, out):
    """
    Bits par échantillon et taux de compression de chaque représentation de l'historique
    """
    schema = load_schema(schema_path) if schema_path else reference_schema()
    variants = list(VariantEnum) if variant == 'all' else [VariantEnum(variant)]
    rows = [compression_report(schema, v, key_fields=key_fields, dense_dim=dense_dim) for v in variants]

    click.echo(f"{'variant':<14} {'bits':>8} {'ratio':>10}")
    for row in rows:
        click.echo(f"{row['variant']:<14} {row['bits_per_sample']:>8} {row['ratio']:>10.2f}")
    if out:
        write_table(Path(out), rows, ('variant', 'snapshot_bits', 'bits_per_sample', 'ratio'))
