"""
Commandes du chemin de service: construction du token store et évaluation
"""
import json
import logging
from pathlib import Path

import click
import torch

from config import RunConfig
from datagen import load_log
from features import load_schema
from mixer import load_mixer
from tokenizer import load_tokenizer
from tokenstore import TokenStore, build_store
from training import evaluate
from utils.rundir import write_json
from .common import DEFAULT_SCHEMA

logger = logging.getLogger(__name__)


def _sibling_tokenizer(mixer_path: str) -> Path:
    path = Path(mixer_path)
    return path.with_name(path.name.replace('mixer_', 'tokenizer_', 1)).with_suffix('.sifc')


@click.command('tokenize')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True,
              help="Checkpoint du tokenizer (.sifc)")
@click.option('--data', type=click.Path(exists=True, dir_okay=False), required=True, help="Journal d'impressions")
@click.option('--schema', 'schema_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fichier de schéma JSON (défaut: data/desk_schema.json)")
@click.option('--out', type=click.Path(dir_okay=False), required=True, help="Token store à écrire (.sifs)")
@click.option('--batch-size', type=click.IntRange(min=1), default=4096, show_default=True)
def tokenize_cmd(checkpoint, data, schema_path, out, batch_size):
    """
    Tokenise tous les positifs du journal avec un tokenizer figé et écrit le token store
    """
    schema = load_schema(schema_path or DEFAULT_SCHEMA)
    log = load_log(data, schema)
    tokenizer = load_tokenizer(checkpoint, schema)
    header = build_store(log, tokenizer, out, batch_size=batch_size)
    click.echo(f"{header.count} Token Samples écrits dans {out} ({header.record_bytes} octets chacun)")


@click.command('eval')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True,
              help="Checkpoint du mixer (.sifm)")
@click.option('--tokenizer', 'tokenizer_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint du tokenizer (défaut: tokenizer_*.sifc voisin du mixer)")
@click.option('--store', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Token store: historiques lus au lieu d'être tokenisés")
@click.option('--data', type=click.Path(exists=True, dir_okay=False), required=True, help="Journal d'impressions")
@click.option('--schema', 'schema_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fichier de schéma JSON (défaut: data/desk_schema.json)")
@click.option('--split', type=click.Choice(['train', 'val', 'test']), default='test', show_default=True)
@click.option('--seq-len', type=click.IntRange(min=0), default=None, help="L (défaut: L_max du mixer)")
@click.option('--out', type=click.Path(dir_okay=False), default=None, help="Rapport JSON à écrire")
def eval_cmd(checkpoint, tokenizer_path, store, data, schema_path, split, seq_len, out):
    """
    MetricReport (AUC, GAUC, LogLoss, FLOPs, paramètres, strates) d'un split
    """
    schema = load_schema(schema_path or DEFAULT_SCHEMA)
    log = load_log(data, schema)
    mixer = load_mixer(checkpoint, schema, dtype=torch.float32)
    tokenizer_path = tokenizer_path or _sibling_tokenizer(checkpoint)
    if not Path(tokenizer_path).exists():
        raise click.UsageError(f"Checkpoint du tokenizer introuvable: {tokenizer_path} (préciser --tokenizer)")
    tokenizer = load_tokenizer(tokenizer_path, schema)

    settings = RunConfig.from_profile().merged({
        'variant': mixer.variant.value,
        'n_blocks': len(mixer.blocks),
        'n_heads': mixer.n_heads,
        'seq_len': mixer.max_seq_len if seq_len is None else seq_len
    })
    rows = log.split_rows(split)
    if store is not None:
        with TokenStore(store, schema) as token_store:
            report = evaluate(log, rows, tokenizer, mixer, settings, store=token_store)
    else:
        report = evaluate(log, rows, tokenizer, mixer, settings)

    if out:
        write_json(out, report.to_dict())
    click.echo(json.dumps(report.to_dict(), indent=2, default=str))
