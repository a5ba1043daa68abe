"""
Entraînement conjoint tokenizer + mixer

L = L_BCE + beta·L_VQ + gamma·L_align + token_weight·L_token, Adam, arrêt précoce
sur l'AUC de validation, et vérification des gradients par différences finies
avec indices et stop-gradients gelés.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import metrics
from config import RunConfig
from exceptions import TrainingDivergedError, UndefinedMetricError, UnknownSampleError
from features import n_slots
from mixer import HistoryBatch, SIFMixer, save_mixer
from models import LossBreakdown, MetricReport, VariantEnum
from tokenizer import SampleTokenizer, save_tokenizer
from utils.freeze import FreezeRegistry, freezing, stop_gradient
from utils.rundir import MetricLog

logger = logging.getLogger(__name__)

DTYPES = {'float32': torch.float32, 'float64': torch.float64}
GRADCHECK_FLOOR = 1e-6


@dataclass
class Batch:
    """Requêtes cibles, labels et historiques d'un lot"""
    rows: np.ndarray
    target_values: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray
    history: HistoryBatch

    def __len__(self):
        return int(self.rows.shape[0])

    def subset(self, index) -> 'Batch':
        history = self.history
        return Batch(
            rows=self.rows[index],
            target_values=self.target_values[index],
            labels=self.labels[index],
            user_ids=self.user_ids[index],
            history=HistoryBatch(
                values=history.values[index],
                item_ids=history.item_ids[index],
                lengths=history.lengths[index],
                indices=None if history.indices is None else history.indices[index]
            )
        )


def build_batch(log, rows, seq_len: int, store=None) -> Batch:
    """
    Assemble un lot depuis le journal

    Args:
        log: ImpressionLog
        rows: Lignes des requêtes cibles
        seq_len: L
        store: TokenStore optionnel (chemin de service: indices lus au lieu d'être recalculés)

    Raises:
        UnknownSampleError: un positif de l'historique manque dans le store
    """
    rows = np.asarray(rows, dtype=np.int64)
    index, lengths = log.history_rows(rows, seq_len)
    safe = np.where(index >= 0, index, 0)
    valid = index >= 0

    values = log.field_values[safe] * valid[..., None]
    item_ids = np.where(valid, log.item_ids[safe].astype(np.int64), 0)
    indices = None
    if store is not None:
        indices = np.zeros((rows.size, seq_len, store.header.n_slots, store.header.levels), dtype=np.int64)
        if valid.any():
            indices[valid] = store.lookup_many(log.sample_ids[index[valid]])

    return Batch(
        rows=rows,
        target_values=log.field_values[rows],
        labels=log.labels[rows].astype(np.float64),
        user_ids=log.user_ids[rows],
        history=HistoryBatch(values=values, item_ids=item_ids, lengths=lengths, indices=indices)
    )


def alignment_loss(tokenizer: SampleTokenizer, mixer: SIFMixer, target_values, trace=None,
                   projection: torch.Tensor | None = None, site: str = 'align') -> torch.Tensor:
    """
    L_align = somme sur (g,k) de ||W_res f_tau - sg(e_{g,k})||^2, moyennée sur le lot

    e_{g,k} est la reconstruction du tokenizer pour la requête elle-même; aucun
    gradient n'atteint les codebooks ni W_proj.

    Args:
        trace: Trace déjà calculée pour target_values (optionnel)
        projection: W_res f_tau déjà calculé, (b, T, d_0) (optionnel)
    """
    if projection is None:
        projection = mixer.embed_target(tokenizer.embed_fields(target_values))
    if trace is None:
        trace = tokenizer.encode(target_values, site=site)
    target = stop_gradient(trace.reconstruction, f"{site}/e")
    return ((projection - target) ** 2).sum(dim=(-2, -1)).mean()


def compute_losses(batch: Batch, tokenizer: SampleTokenizer, mixer: SIFMixer,
                   settings: RunConfig) -> tuple[torch.Tensor, dict]:
    """
    Perte totale et ses composantes (tenseurs) pour un lot

    Les historiques sont re-quantifiés à la volée avec les codebooks courants.
    """
    hidden, valid = mixer.assemble(tokenizer, batch.target_values, batch.history,
                                   sequence_grad=settings.sequence_route)
    logits = mixer(hidden, valid)
    labels = torch.as_tensor(batch.labels, dtype=logits.dtype, device=logits.device)
    parts = {'bce': F.binary_cross_entropy_with_logits(logits, labels)}

    zero = logits.new_zeros(())
    if mixer.variant.uses_tokenizer:
        token, vq, trace = tokenizer.tokenizer_losses(
            batch.target_values, batch.labels,
            codebook_term=settings.codebook_loss, aux_codebook_grad=settings.aux_route
        )
        parts['vq'] = vq
        parts['token'] = token
        parts['align'] = alignment_loss(tokenizer, mixer, batch.target_values, trace=trace,
                                        projection=hidden[:, 0])
    else:
        parts.update(vq=zero, token=zero, align=zero)

    total = (parts['bce'] + settings.beta_vq * parts['vq'] + settings.gamma_align * parts['align']
             + settings.token_weight * parts['token'])
    return total, parts


def _breakdown(parts: dict, settings: RunConfig) -> LossBreakdown:
    return LossBreakdown(
        bce=float(parts['bce']), vq=float(parts['vq']), align=float(parts['align']),
        token=float(parts['token']), beta=settings.beta_vq, gamma=settings.gamma_align,
        token_weight=settings.token_weight
    )


def _check_finite(parts: dict, total: torch.Tensor) -> None:
    for name, value in [*parts.items(), ('total', total)]:
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(name, float(value))


def train_step(batch: Batch, tokenizer: SampleTokenizer, mixer: SIFMixer, optimizer: torch.optim.Optimizer,
               settings: RunConfig) -> LossBreakdown:
    """
    Un pas d'Adam sur tous les paramètres entraînables

    Avec shards > 1, le lot est découpé et les gradients des morceaux sont sommés
    avant la mise à jour (égal au pas non découpé aux effets d'ordre de sommation près).

    Returns:
        LossBreakdown avant le pas

    Raises:
        TrainingDivergedError: composante non finie (le pas n'est pas appliqué)
    """
    optimizer.zero_grad(set_to_none=True)
    size = len(batch)
    totals = {}
    for chunk in np.array_split(np.arange(size), min(settings.shards, size)):
        part_batch = batch if chunk.size == size else batch.subset(chunk)
        total, parts = compute_losses(part_batch, tokenizer, mixer, settings)
        _check_finite(parts, total)
        weight = chunk.size / size
        (total * weight).backward()
        for name, value in parts.items():
            totals[name] = totals.get(name, 0.0) + weight * float(value)

    if any(group['lr'] > 0 for group in optimizer.param_groups):
        optimizer.step()
        tokenizer.enforce_zero_rows()
    return _breakdown(totals, settings)


def build_optimizer(tokenizer: SampleTokenizer, mixer: SIFMixer, settings: RunConfig) -> torch.optim.Adam:
    """
    Adam avec deux groupes: décroissance des poids sauf biais et paramètres de LayerNorm
    """
    decay, exempt = [], []
    for module in (tokenizer, mixer):
        for sub in module.modules():
            for name, param in sub.named_parameters(recurse=False):
                if not param.requires_grad:
                    continue
                if isinstance(sub, nn.LayerNorm) or name == 'bias':
                    exempt.append(param)
                else:
                    decay.append(param)
    return torch.optim.Adam(
        [{'params': decay, 'weight_decay': settings.weight_decay},
         {'params': exempt, 'weight_decay': 0.0}],
        lr=settings.lr, betas=(settings.adam_beta1, settings.adam_beta2), eps=settings.adam_eps
    )


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def build_models(schema, settings: RunConfig, n_items: int) -> tuple[SampleTokenizer, SIFMixer]:
    """Tokenizer et mixer initialisés depuis la graine courante, au dtype demandé"""
    dtype = DTYPES[settings.dtype]
    tokenizer = SampleTokenizer(schema, commitment=settings.commitment).to(dtype)
    mixer = SIFMixer(schema, variant=settings.variant, n_blocks=settings.n_blocks, n_heads=settings.n_heads,
                     max_seq_len=settings.seq_len, n_items=n_items, dense_dim=settings.dense_dim,
                     key_fields=settings.key_fields).to(dtype)
    return tokenizer, mixer


# Évaluation

@torch.no_grad()
def predict_rows(log, rows, tokenizer: SampleTokenizer, mixer: SIFMixer, seq_len: int,
                 batch_size: int = 1024, store=None) -> tuple[np.ndarray, np.ndarray]:
    """
    Scores y^ et longueurs d'historique pour des lignes du journal

    Args:
        store: TokenStore pour lire les historiques (service) au lieu de les tokeniser

    Returns:
        (scores, longueurs)
    """
    tokenizer.eval()
    mixer.eval()
    rows = np.asarray(rows, dtype=np.int64)
    scores, lengths = [], []
    for start in range(0, rows.size, batch_size):
        batch = build_batch(log, rows[start:start + batch_size], seq_len, store=store)
        scores.append(mixer.score(tokenizer, batch.target_values, batch.history).cpu().numpy())
        lengths.append(batch.history.lengths)
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(scores).astype(np.float64), np.concatenate(lengths)


def evaluate(log, rows, tokenizer: SampleTokenizer, mixer: SIFMixer, settings: RunConfig,
             store=None) -> MetricReport:
    """
    MetricReport d'un ensemble de lignes (AUC, GAUC, LogLoss, FLOPs, paramètres, strates)

    Raises:
        UndefinedMetricError: une seule classe dans les lignes évaluées
    """
    scores, lengths = predict_rows(log, rows, tokenizer, mixer, settings.seq_len,
                                   batch_size=max(settings.batch_size, 256), store=store)
    labels = log.labels[rows]
    users = log.user_ids[rows]
    value, used, skipped = metrics.gauc_details(scores, labels, users)
    schema = tokenizer.schema
    return MetricReport(
        auc=metrics.auc(scores, labels),
        gauc=value,
        n_scored=int(scores.size),
        n_groups_used=used,
        n_groups_skipped=skipped,
        logloss=metrics.logloss(scores, labels),
        flops_per_example=metrics.flops_estimate(settings.seq_len, n_slots(schema), schema.sub_token_dim,
                                                 settings.n_blocks, settings.n_heads, mixer.variant),
        params={'tokenizer': metrics.count_parameters(tokenizer), 'mixer': metrics.count_parameters(mixer)},
        strata=metrics.stratified(scores, labels, users, lengths, settings.strata)
    )


# Boucle d'entraînement

@dataclass
class TrainResult:
    tokenizer: SampleTokenizer
    mixer: SIFMixer
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float('nan')

    @property
    def epoch_losses(self) -> list[float]:
        return [entry['train_loss'] for entry in self.history]


def fit(log, schema, settings: RunConfig, run_dir=None) -> TrainResult:
    """
    Entraîne une variante de bout en bout avec arrêt précoce sur l'AUC de validation

    Args:
        log: ImpressionLog (découpage train/val temporel)
        schema: FeatureSchema du journal
        settings: RunConfig effectif
        run_dir: Répertoire de run (journal de métriques et checkpoints), None = aucun fichier

    Returns:
        TrainResult avec les meilleurs états restaurés

    Raises:
        TrainingDivergedError: perte non finie
    """
    set_determinism(settings.seed, settings.deterministic)
    tokenizer, mixer = build_models(schema, settings, log.n_items)
    optimizer = build_optimizer(tokenizer, mixer, settings)
    uses_tokenizer = VariantEnum(settings.variant).uses_tokenizer
    rng = np.random.default_rng(settings.seed)
    generator = torch.Generator().manual_seed(settings.seed)

    metric_log = MetricLog(Path(run_dir) / 'metrics.csv') if run_dir is not None else None
    train_rows = log.split_rows('train')
    val_rows = log.split_rows('val')
    result = TrainResult(tokenizer=tokenizer, mixer=mixer)
    best_states = None
    stale = 0
    step = 0

    logger.info(
        f"Entraînement {settings.variant}: {train_rows.size} exemples, T={tokenizer.n_slots}, "
        f"L={settings.seq_len}, N={settings.n_blocks}"
    )
    for epoch in range(settings.max_epochs):
        tokenizer.train()
        mixer.train()
        tokenizer.pin_zero_row = epoch < settings.zero_row_epochs
        tokenizer.track_usage = uses_tokenizer and settings.reseed_dead_codes
        tokenizer.reset_usage()

        order = rng.permutation(train_rows)
        epoch_total, seen = 0.0, 0
        for index, start in enumerate(range(0, order.size, settings.batch_size)):
            if settings.max_batches_per_epoch and index >= settings.max_batches_per_epoch:
                break
            batch = build_batch(log, order[start:start + settings.batch_size], settings.seq_len)
            breakdown = train_step(batch, tokenizer, mixer, optimizer, settings)
            epoch_total += breakdown.total * len(batch)
            seen += len(batch)
            step += 1
            if metric_log is not None:
                metric_log.append(kind='step', epoch=epoch, step=step, **{
                    k: v for k, v in breakdown.to_dict().items() if k in ('bce', 'vq', 'align', 'token', 'total')
                })
        tokenizer.track_usage = False

        reseeded = 0
        if uses_tokenizer and settings.reseed_dead_codes and settings.lr > 0:
            reseeded = tokenizer.reseed_dead_codes(generator)

        try:
            report = evaluate(log, val_rows, tokenizer, mixer, settings)
            val_auc, val_gauc = report.auc, report.gauc
        except UndefinedMetricError as e:
            logger.warning(f"Validation non évaluable à l'époque {epoch}: {str(e)}")
            val_auc, val_gauc = float('nan'), float('nan')

        train_loss = epoch_total / max(seen, 1)
        result.history.append({'epoch': epoch, 'train_loss': train_loss, 'val_auc': val_auc,
                               'val_gauc': val_gauc, 'reseeded': reseeded})
        logger.info(f"Époque {epoch}: perte {train_loss:.5f}, AUC val {val_auc:.4f}, GAUC val {val_gauc:.4f}")
        if metric_log is not None:
            metric_log.append(kind='epoch', epoch=epoch, step=step, total=train_loss,
                              val_auc=val_auc, val_gauc=val_gauc, reseeded=reseeded)
        if run_dir is not None:
            save_tokenizer(tokenizer, Path(run_dir) / f'tokenizer_epoch{epoch}.sifc')
            save_mixer(mixer, Path(run_dir) / f'mixer_epoch{epoch}.sifm')

        improved = not math.isnan(val_auc) and (math.isnan(result.best_auc) or val_auc > result.best_auc)
        if best_states is None or improved:
            result.best_epoch, result.best_auc = epoch, val_auc
            best_states = (copy.deepcopy(tokenizer.state_dict()), copy.deepcopy(mixer.state_dict()))
            stale = 0
        else:
            stale += 1
            if stale >= settings.patience:
                logger.info(f"Arrêt précoce à l'époque {epoch} (meilleure: {result.best_epoch})")
                break

    tokenizer.load_state_dict(best_states[0])
    mixer.load_state_dict(best_states[1])
    tokenizer.pin_zero_row = False
    if run_dir is not None:
        save_tokenizer(tokenizer, Path(run_dir) / 'tokenizer_best.sifc')
        save_mixer(mixer, Path(run_dir) / 'mixer_best.sifm')
    return result


# Vérification des gradients

@dataclass
class GroupCheck:
    max_rel_err: float
    n_checked: int
    non_smooth: bool = False


@dataclass
class GradcheckReport:
    """Erreur relative maximale par tenseur de paramètres"""
    mode: str
    step: float
    tolerance: float
    groups: dict = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    @property
    def non_smooth_groups(self) -> list[str]:
        return [name for name, g in self.groups.items() if g.non_smooth]

    def to_dict(self):
        return {
            'mode': self.mode,
            'step': self.step,
            'tolerance': self.tolerance,
            'max_rel_err': self.max_rel_err,
            'passed': self.passed,
            'groups': {name: g.__dict__ for name, g in self.groups.items()}
        }


def gradcheck(settings: RunConfig | None = None, seed: int = 0, mode: str = 'full', step: float = 1e-5,
              max_coords: int | None = 64, tolerance: float = 1e-4, log=None, schema=None) -> GradcheckReport:
    """
    Différences finies centrales contre gradients analytiques, en float64

    Une passe d'enregistrement fige indices de quantification et stop-gradients;
    chaque perturbation rejoue ces valeurs. Un argmin qui aurait changé est signalé
    (groupe non lisse) sans interrompre la vérification.

    Args:
        settings: Configuration (défaut: profil testing)
        mode: 'full' (objectif complet) ou 'mixer_only' (tokenizer figé, L_VQ, L_align et L_token coupés)
        step: Pas h
        max_coords: Coordonnées échantillonnées par tenseur (None = toutes)

    Returns:
        GradcheckReport (ne lève jamais pour un écart numérique)
    """
    from datagen import generate_log
    from features import tiny_schema

    if mode not in ('full', 'mixer_only'):
        raise ValueError(f"Mode de gradcheck inconnu: {mode}")
    settings = settings or RunConfig.from_profile('testing')
    settings = settings.merged({'dtype': 'float64', 'shards': 1})
    if mode == 'mixer_only':
        settings = settings.merged({'beta_vq': 0.0, 'gamma_align': 0.0, 'token_weight': 0.0})

    schema = tiny_schema() if schema is None else schema
    if log is None:
        log = generate_log(schema, n_users=12, n_items=10, n_impressions=240, seed=seed)
    torch.manual_seed(seed)
    tokenizer, mixer = build_models(schema, settings, log.n_items)
    tokenizer.pin_zero_row = False
    if mode == 'mixer_only':
        tokenizer.requires_grad_(False)

    with_history = np.flatnonzero(log.history_rows(np.arange(len(log)), settings.seq_len)[1] > 0)
    rows = np.concatenate([with_history[:6], np.arange(2)])
    batch = build_batch(log, rows, settings.seq_len)

    registry = FreezeRegistry('record')
    with freezing(registry):
        total, _ = compute_losses(batch, tokenizer, mixer, settings)
    total.backward()
    registry.replaying()

    def replayed_loss():
        with freezing(registry), torch.no_grad():
            return float(compute_losses(batch, tokenizer, mixer, settings)[0])

    rng = np.random.default_rng(seed)
    report = GradcheckReport(mode=mode, step=step, tolerance=tolerance)
    named = [(f'tokenizer.{n}', p) for n, p in tokenizer.named_parameters()]
    named += [(f'mixer.{n}', p) for n, p in mixer.named_parameters()]
    for name, param in named:
        if not param.requires_grad:
            continue
        analytic = param.grad if param.grad is not None else torch.zeros_like(param)
        coords = np.arange(param.numel())
        if max_coords is not None and coords.size > max_coords:
            coords = rng.choice(coords, size=max_coords, replace=False)

        registry.flipped = set()
        worst = 0.0
        flat = param.data.view(-1)
        for coord in coords:
            original = flat[coord].item()
            flat[coord] = original + step
            plus = replayed_loss()
            flat[coord] = original - step
            minus = replayed_loss()
            flat[coord] = original
            numeric = (plus - minus) / (2 * step)
            exact = analytic.view(-1)[coord].item()
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), GRADCHECK_FLOOR)
            worst = max(worst, err)
        report.groups[name] = GroupCheck(max_rel_err=worst, n_checked=int(coords.size),
                                         non_smooth=bool(registry.flipped))
        if registry.flipped:
            logger.warning(f"Gradcheck: {name} non lisse au pas {step} ({len(registry.flipped)} sites d'argmin basculés)")

    logger.info(f"Gradcheck {mode}: erreur relative max {report.max_rel_err:.3e}")
    return report


def score_with_store(log, rows, tokenizer, mixer, settings: RunConfig, store) -> np.ndarray:
    """Scores du chemin de service (historiques lus dans le token store)"""
    try:
        return predict_rows(log, rows, tokenizer, mixer, settings.seq_len, store=store)[0]
    except UnknownSampleError:
        logger.error("Historique absent du token store: reconstruire le store avec ce journal")
        raise
