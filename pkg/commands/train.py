"""
Commandes d'entraînement et de vérification des gradients
"""
import json
import logging

import click

from config import RunConfig
from datagen import load_log
from exceptions import TrainingDivergedError, UndefinedMetricError
from features import load_schema
from training import evaluate, fit, gradcheck
from utils.rundir import attach_file_log, detach_file_log, prepare_run_dir, write_json
from .common import VARIANT_CHOICE, config_options, pop_flags, resolve_schema, resolve_settings

logger = logging.getLogger(__name__)


@click.command('train')
@click.option('--variant', type=VARIANT_CHOICE, default=None, help="Variante à entraîner (défaut full)")
@config_options
def train_cmd(**kwargs):
    """
    Entraîne une variante et écrit checkpoints, journal de métriques et rapport de test
    """
    profile, config_path, flags = pop_flags(kwargs)
    settings = resolve_settings(profile, config_path, flags)
    if not settings.data:
        raise click.UsageError("Journal requis: --data ou clé data du fichier de configuration")

    schema = resolve_schema(settings)
    log = load_log(settings.data, schema)
    run_dir = prepare_run_dir(settings.out, settings)
    handler = attach_file_log(run_dir)
    try:
        result = fit(log, schema, settings, run_dir=run_dir)
        write_json(run_dir / 'history.json', result.history)
        try:
            report = evaluate(log, log.split_rows('test'), result.tokenizer, result.mixer, settings)
            write_json(run_dir / 'test_report.json', report.to_dict())
            click.echo(f"AUC test {report.auc:.4f}, GAUC test {report.gauc:.4f}")
        except UndefinedMetricError as e:
            logger.warning(f"Rapport de test non calculable: {str(e)}")
    except TrainingDivergedError as e:
        logger.error(f"Entraînement interrompu: {str(e)}")
        raise
    finally:
        detach_file_log(handler)
    click.echo(f"Run écrite dans {run_dir} (meilleure époque {result.best_epoch})")


@click.command('gradcheck')
@click.option('--tiny', is_flag=True, help="Configuration minuscule (L=4, T=3, d_0=4, N=1, M=2, V=4, float64)")
@click.option('--schema', 'schema_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Schéma à vérifier à la place du schéma minuscule")
@click.option('--mode', type=click.Choice(['full', 'mixer_only']), default='full', show_default=True)
@click.option('--variant', type=VARIANT_CHOICE, default='full', show_default=True)
@click.option('--step', type=float, default=1e-5, show_default=True, help="Pas des différences centrales")
@click.option('--tolerance', type=float, default=1e-4, show_default=True, help="Erreur relative maximale tolérée")
@click.option('--max-coords', type=int, default=64, show_default=True, help="Coordonnées échantillonnées par tenseur")
@click.option('--exhaustive', is_flag=True, help="Vérifier toutes les coordonnées")
@click.option('--seed', type=int, default=0, show_default=True)
@click.pass_context
def gradcheck_cmd(ctx, tiny, schema_path, mode, variant, step, tolerance, max_coords, exhaustive, seed):
    """
    Compare gradients analytiques et différences finies; code 0 si l'erreur maximale respecte la tolérance
    """
    if not tiny and schema_path is None:
        raise click.UsageError("Préciser --tiny ou --schema")
    settings = RunConfig.from_profile('testing').merged({'variant': variant})
    schema = load_schema(schema_path) if schema_path else None
    report = gradcheck(settings, seed=seed, mode=mode, step=step, max_coords=None if exhaustive else max_coords,
                       tolerance=tolerance, schema=schema)
    click.echo(json.dumps(report.to_dict(), indent=2))
    if report.non_smooth_groups:
        click.echo(f"Groupes non lisses: {', '.join(report.non_smooth_groups)}", err=True)
    ctx.exit(0 if report.passed else 1)
