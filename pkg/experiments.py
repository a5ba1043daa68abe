"""
Balayages d'hyperparamètres (B, N, L) et ablations multi-graines
"""
import logging
import math
from pathlib import Path

import numpy as np
from scipy.stats import ttest_rel

from config import RunConfig
from exceptions import SIFError
from features import apply_overrides, n_slots
from models import VariantEnum
from training import evaluate, fit
from utils.rundir import write_json, write_table

logger = logging.getLogger(__name__)

SWEEP_AXES = {'B': 'granularity', 'N': 'n_blocks', 'L': 'seq_len'}
SWEEP_COLUMNS = ('axis', 'value', 'status', 'n_slots', 'val_auc', 'val_gauc', 'test_auc', 'test_gauc',
                 'flops_per_example', 'best_epoch', 'error')
ABLATION_COLUMNS = ('variant', 'n_seeds', 'auc_mean', 'auc_std', 'gauc_mean', 'gauc_std',
                    'delta_auc', 't_stat', 'p_value')


def _run_point(log, schema, settings: RunConfig, run_dir: Path | None) -> dict:
    result = fit(log, schema, settings, run_dir=run_dir)
    report = evaluate(log, log.split_rows('test'), result.tokenizer, result.mixer, settings)
    return {
        'val_auc': result.best_auc,
        'val_gauc': result.history[result.best_epoch]['val_gauc'],
        'test_auc': report.auc,
        'test_gauc': report.gauc,
        'flops_per_example': report.flops_per_example,
        'best_epoch': result.best_epoch,
        'report': report.to_dict()
    }


def sweep(axis: str, values, settings: RunConfig, log, schema, out_dir) -> list[dict]:
    """
    Un entraînement par valeur, graine et budget communs

    Un échec est consigné dans sa ligne (status='failed') et le balayage continue.

    Args:
        axis: 'B' (granularité), 'N' (profondeur) ou 'L' (longueur d'historique)
        values: Valeurs à balayer
        settings: RunConfig de base
        log: ImpressionLog partagé
        schema: FeatureSchema de base
        out_dir: Répertoire recevant sweep.csv et un JSON par point

    Returns:
        Lignes de la table
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"Axe de balayage inconnu: {axis} (attendu: {', '.join(SWEEP_AXES)})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = SWEEP_AXES[axis]

    rows = []
    for value in values:
        value = int(value)
        row = {'axis': axis, 'value': value}
        point_settings = settings if axis == 'B' else settings.merged({key: value})
        run_dir = out_dir / f"{axis}_{value}"
        run_dir.mkdir(exist_ok=True)
        try:
            point_schema = apply_overrides(schema, granularity=value) if axis == 'B' else schema
            row['n_slots'] = n_slots(point_schema)
            outcome = _run_point(log, point_schema, point_settings, run_dir)
            row.update({k: v for k, v in outcome.items() if k != 'report'}, status='ok')
            logger.info(f"Balayage {axis}={value}: GAUC test {row['test_gauc']:.4f}")
        except (SIFError, ValueError, RuntimeError) as e:
            logger.error(f"Balayage {axis}={value} en échec: {str(e)}")
            outcome = None
            row.update(status='failed', error=str(e))
        rows.append(row)
        write_json(out_dir / f"{axis}_{value}.json", {
            'row': row,
            'config': point_settings.to_dict(),
            'report': outcome['report'] if outcome else None
        })

    write_table(out_dir / 'sweep.csv', rows, SWEEP_COLUMNS)
    return rows


def _run_seed(log, schema, settings: RunConfig, run_dir: Path) -> dict:
    result = fit(log, schema, settings, run_dir=run_dir)
    return result.history[result.best_epoch] | {'history': result.history}


def ablate(variants, seeds, settings: RunConfig, log, schema, out_dir) -> list[dict]:
    """
    Entraîne chaque variante sur plusieurs graines à budget égal

    Rapporte moyenne et écart-type de l'AUC et de la GAUC de validation, et un
    test t apparié (graines réussies communes) de chaque variante contre 'full'.
    Une graine en échec est consignée dans son result.json et exclue des moyennes.

    Returns:
        Une ligne par variante
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = [VariantEnum(v).value for v in variants]
    seeds = [int(s) for s in seeds]

    scores = {}
    for variant in variants:
        per_seed = {}
        for seed in seeds:
            run_settings = settings.merged({'variant': variant, 'seed': seed})
            run_dir = out_dir / f"{variant}_seed{seed}"
            run_dir.mkdir(exist_ok=True)
            try:
                best = _run_seed(log, schema, run_settings, run_dir)
            except (SIFError, ValueError, RuntimeError) as e:
                logger.error(f"Ablation {variant} graine {seed} en échec: {str(e)}")
                write_json(run_dir / 'result.json', {'variant': variant, 'seed': seed, 'status': 'failed',
                                                     'error': str(e)})
                continue
            per_seed[seed] = (best['val_auc'], best['val_gauc'])
            write_json(run_dir / 'result.json', {'variant': variant, 'seed': seed, 'status': 'ok',
                                                 'history': best['history']})
        scores[variant] = per_seed
        if per_seed:
            logger.info(f"Ablation {variant}: AUC val moyenne {np.mean([a for a, _ in per_seed.values()]):.4f}")

    reference = scores.get(VariantEnum.FULL.value)
    rows = []
    for variant, per_seed in scores.items():
        aucs = np.asarray([a for a, _ in per_seed.values()], dtype=np.float64)
        gaucs = np.asarray([g for _, g in per_seed.values()], dtype=np.float64)
        row = {
            'variant': variant,
            'n_seeds': len(per_seed),
            'auc_mean': float(aucs.mean()) if aucs.size else None,
            'auc_std': float(aucs.std(ddof=1)) if aucs.size > 1 else 0.0,
            'gauc_mean': float(gaucs.mean()) if gaucs.size else None,
            'gauc_std': float(gaucs.std(ddof=1)) if gaucs.size > 1 else 0.0,
            'delta_auc': None, 't_stat': None, 'p_value': None
        }
        shared = sorted(set(per_seed) & set(reference or {}))
        if variant != VariantEnum.FULL.value and shared:
            base = np.asarray([reference[s][0] for s in shared])
            other = np.asarray([per_seed[s][0] for s in shared])
            row['delta_auc'] = float(base.mean() - other.mean())
            if len(shared) > 1:
                test = ttest_rel(base, other)
                row['t_stat'] = None if math.isnan(test.statistic) else float(test.statistic)
                row['p_value'] = None if math.isnan(test.pvalue) else float(test.pvalue)
        rows.append(row)

    write_table(out_dir / 'ablation.csv', rows, ABLATION_COLUMNS)
    write_json(out_dir / 'ablation.json', rows)
    return rows
