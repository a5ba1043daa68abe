"""
Répertoire de run: instantané de configuration, journal texte et tables de métriques
"""
import csv
import json
import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def prepare_run_dir(out, run_config) -> Path:
    """
    Crée le répertoire de run et y fige la configuration effective (config.json)

    Doit être appelé avant tout calcul.

    Args:
        out: Répertoire de sortie
        run_config: RunConfig effectif

    Returns:
        Chemin du répertoire
    """
    run_dir = Path(out)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / 'config.json', run_config.to_dict())
    logger.info(f"Configuration figée dans {run_dir / 'config.json'}")
    return run_dir


def attach_file_log(run_dir) -> logging.Handler:
    """Ajoute run.log au logger racine; retourne le handler pour le détacher ensuite"""
    handler = logging.FileHandler(Path(run_dir) / 'run.log')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_file_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def write_json(path, payload) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


class MetricLog:
    """
    Journal de métriques en ajout seul (lignes CSV avec en-tête)

    Les colonnes absentes d'un enregistrement restent vides.
    """

    COLUMNS = ('kind', 'epoch', 'step', 'bce', 'vq', 'align', 'token', 'total',
               'val_auc', 'val_gauc', 'reseeded')

    def __init__(self, path, columns=COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        if not self.path.exists() or os.path.getsize(self.path) == 0:
            with open(self.path, 'w', newline='', encoding='utf-8') as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, **record) -> None:
        unknown = set(record) - set(self.columns)
        if unknown:
            raise KeyError(f"Colonnes inconnues: {sorted(unknown)}")
        with open(self.path, 'a', newline='', encoding='utf-8') as fh:
            csv.writer(fh).writerow([_format(record.get(c)) for c in self.columns])


def _format(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return value


def write_table(path, rows: list[dict], columns=None) -> None:
    """Table CSV avec ligne d'en-tête"""
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(row.get(k)) for k in columns})
