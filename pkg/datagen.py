"""
Générateur de journal d'impressions synthétique

Produit des Raw Samples multi-champs, des historiques par utilisateur et des
labels portant un signal planté: l'interaction entre les champs contextuels
des anciens positifs de l'utilisateur et la catégorie de l'item cible.
Ce signal n'est pas récupérable à partir des seuls item IDs historiques.
"""
import logging
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from exceptions import StoreFormatError, SchemaMismatchError, UnknownSampleError
from features import schema_hash
from models import FeatureSchema, GroupEnum, RawSample

logger = logging.getLogger(__name__)

LOG_MAGIC = b'SIFL'
LOG_VERSION = 1
# magic, version, schema hash, n_samples, seed, fin du train, fin de la validation
LOG_HEADER = struct.Struct('<4sHQQQQQ')

# Constantes gelées du générateur
LABEL_BIAS = -1.6
CURRENT_SCALE = 1.0
HISTORY_SCALE = 2.5
HISTORY_WINDOW = 10
NOISE_STD = 0.3
MIN_GAP_SECONDS = 60
MAX_GAP_SECONDS = 7200
START_SPREAD_SECONDS = 7 * 86400
SPLIT_FRACTIONS = (0.8, 0.9)

_PARAMS_STREAM = 0
_USER_STREAM = 1


@dataclass
class PlantedParams:
    """
    Coefficients cachés du générateur (tirés depuis la graine)

    Attributs:
        field_weights: Poids de la partie courante, un tableau par champ
        history_weights: {indice de champ contextuel: tableau (cardinalité ou 1, n_categories)}
        item_values: Valeurs des champs item pour chaque item (n_items, F)
        category_field: Indice du champ catégorie d'item (None = item_id modulo)
        n_categories: Nombre de catégories d'item
        user_counts: Nombre d'impressions par utilisateur
        cross_coefs: {indice de champ croisé catégoriel: (a, b, c)}
    """
    field_weights: list
    history_weights: dict
    item_values: np.ndarray
    category_field: int | None
    n_categories: int
    user_counts: np.ndarray
    cross_coefs: dict
    n_items: int
    bias: float = LABEL_BIAS
    history_scale: float = HISTORY_SCALE
    noise_std: float = NOISE_STD
    window: int = HISTORY_WINDOW


@dataclass
class ImpressionLog:
    """
    Journal d'impressions trié par (user_id, timestamp)

    Les colonnes sont stockées en tableaux numpy; field_values a la forme (n, F).
    Les termes plantés (eta_current, psi) ne sont présents que pour un journal généré.
    """
    schema: FeatureSchema
    sample_ids: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    field_values: np.ndarray
    generator_seed: int
    split_bounds: tuple[int, int]
    planted_params: PlantedParams | None = None
    eta_current: np.ndarray | None = None
    psi: np.ndarray | None = None
    signal_strength: float = 0.0
    _positives: np.ndarray = field(init=False, repr=False)
    _user_first_row: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._positives = np.flatnonzero(self.labels == 1)
        users, first = np.unique(self.user_ids, return_index=True)
        self._user_first_row = dict(zip(users.tolist(), first.tolist()))

    def __len__(self):
        return int(self.sample_ids.shape[0])

    @property
    def n_items(self) -> int:
        if self.planted_params is not None:
            return self.planted_params.n_items
        return int(self.item_ids.max()) + 1 if len(self) else 1

    def row_of(self, sample_id: int) -> int:
        """Indice de ligne d'un sample_id (les ids sont triés)"""
        row = int(np.searchsorted(self.sample_ids, sample_id))
        if row >= len(self) or int(self.sample_ids[row]) != int(sample_id):
            raise UnknownSampleError(sample_id)
        return row

    def sample(self, row: int) -> RawSample:
        """Construit le RawSample de la ligne donnée"""
        return RawSample(
            sample_id=int(self.sample_ids[row]),
            user_id=int(self.user_ids[row]),
            item_id=int(self.item_ids[row]),
            timestamp=int(self.timestamps[row]),
            field_values=tuple(float(v) for v in self.field_values[row]),
            label=int(self.labels[row])
        )

    def history_rows(self, rows, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        """
        Lignes des L positifs les plus récents strictement antérieurs à chaque requête

        Args:
            rows: Lignes des requêtes
            seq_len: L

        Returns:
            (index (b, L) du plus ancien au plus récent, -1 en padding; longueurs réelles (b,))
        """
        rows = np.asarray(rows, dtype=np.int64)
        index = np.full((rows.shape[0], seq_len), -1, dtype=np.int64)
        lengths = np.zeros(rows.shape[0], dtype=np.int64)
        if seq_len == 0 or rows.size == 0:
            return index, lengths

        # positifs du même utilisateur situés avant la ligne (horodatages strictement croissants)
        upto = np.searchsorted(self._positives, rows, side='left')
        first_rows = np.array([self._user_first_row[int(u)] for u in self.user_ids[rows]], dtype=np.int64)
        start = np.searchsorted(self._positives, first_rows, side='left')
        lengths = np.minimum(upto - start, seq_len)
        for b in range(rows.shape[0]):
            n = int(lengths[b])
            if n:
                index[b, :n] = self._positives[upto[b] - n:upto[b]]
        return index, lengths

    def behavior_sequence(self, sample_id: int, seq_len: int) -> tuple[list[RawSample], int]:
        """
        Séquence comportementale d'une requête

        Args:
            sample_id: Identifiant de la requête
            seq_len: L

        Returns:
            (positifs antérieurs du plus ancien au plus récent, longueur réelle)

        Raises:
            UnknownSampleError: sample_id absent
        """
        row = self.row_of(sample_id)
        index, lengths = self.history_rows([row], seq_len)
        n = int(lengths[0])
        return [self.sample(int(r)) for r in index[0, :n]], n

    def split_of(self, rows=None) -> np.ndarray:
        """0 = train, 1 = validation, 2 = test (découpage temporel 80/10/10)"""
        ts = self.timestamps if rows is None else self.timestamps[rows]
        return np.searchsorted(np.asarray(self.split_bounds), ts, side='right')

    def split_rows(self, split: str) -> np.ndarray:
        code = {'train': 0, 'val': 1, 'test': 2}[split]
        return np.flatnonzero(self.split_of() == code)

    def bayes_scores(self, rows=None, with_history: bool = True) -> np.ndarray:
        """
        Logit planté sans bruit (score Bayes-optimal)

        Args:
            rows: Lignes à scorer (None = tout le journal)
            with_history: False = terme d'historique remplacé par sa moyenne par catégorie cible

        Returns:
            Scores (n,)
        """
        if self.planted_params is None:
            raise ValueError("Journal chargé depuis un fichier: paramètres plantés indisponibles")
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        params = self.planted_params
        psi = self.psi
        if not with_history:
            categories = _categories(self.field_values, self.item_ids, params)
            means = np.zeros(params.n_categories)
            for c in range(params.n_categories):
                mask = categories == c
                if mask.any():
                    means[c] = psi[mask].mean()
            psi = means[categories]
        return params.bias + self.eta_current[rows] + self.signal_strength * params.history_scale * psi[rows]


def _role(schema: FeatureSchema, index: int) -> str:
    spec = schema.fields[index]
    if spec.group == GroupEnum.USER.value:
        return 'user'
    if spec.group == GroupEnum.ITEM.value or spec.name == 'item_id' or spec.group == 'item_id':
        return 'item'
    if spec.group == GroupEnum.CROSS.value:
        return 'cross'
    return 'ctx'


def _draw_value(rng, spec, size):
    if spec.is_categorical:
        return rng.integers(0, spec.cardinality, size).astype(np.float64)
    return rng.standard_normal(size).astype(np.float32).astype(np.float64)


def _categories(values, item_ids, params: PlantedParams) -> np.ndarray:
    if params.category_field is None:
        return (item_ids % params.n_categories).astype(np.int64)
    return values[:, params.category_field].astype(np.int64)


def draw_params(schema: FeatureSchema, n_users: int, n_items: int, n_impressions: int, seed: int) -> PlantedParams:
    """
    Tire les coefficients cachés et la table des items

    Args:
        schema: Schéma des champs
        n_users, n_items, n_impressions: Tailles du journal
        seed: Graine du générateur

    Returns:
        PlantedParams
    """
    rng = np.random.default_rng([seed, _PARAMS_STREAM])
    n_fields = len(schema.fields)
    roles = [_role(schema, i) for i in range(n_fields)]

    category_field = None
    for i, spec in enumerate(schema.fields):
        if roles[i] == 'item' and spec.is_categorical and spec.name != 'item_id':
            category_field = i
            if 'category' in spec.name:
                break
    n_categories = schema.fields[category_field].cardinality if category_field is not None else 8

    scale = CURRENT_SCALE / np.sqrt(n_fields)
    field_weights = []
    for spec in schema.fields:
        size = spec.cardinality if spec.is_categorical else 1
        field_weights.append(rng.normal(0.0, scale, size))

    # champs contextuels porteurs du signal d'historique (croisés à défaut de ctx)
    context = [i for i in range(n_fields) if roles[i] == 'ctx'] or [i for i in range(n_fields) if roles[i] == 'cross']
    norm = 1.0 / np.sqrt(max(len(context), 1))
    history_weights = {}
    for i in context:
        spec = schema.fields[i]
        rows = spec.cardinality if spec.is_categorical else 1
        history_weights[i] = rng.normal(0.0, norm, (rows, n_categories))

    item_values = np.zeros((n_items, n_fields))
    for i, spec in enumerate(schema.fields):
        if roles[i] != 'item':
            continue
        if spec.name == 'item_id':
            item_values[:, i] = np.arange(n_items) % spec.cardinality
        else:
            item_values[:, i] = _draw_value(rng, spec, n_items)

    cross_coefs = {
        i: tuple(int(x) for x in rng.integers(1, 97, 3))
        for i, spec in enumerate(schema.fields)
        if roles[i] == 'cross' and spec.is_categorical
    }

    weights = rng.lognormal(0.0, 0.5, n_users)
    user_counts = rng.multinomial(n_impressions, weights / weights.sum())

    return PlantedParams(
        field_weights=field_weights,
        history_weights=history_weights,
        item_values=item_values,
        category_field=category_field,
        n_categories=n_categories,
        user_counts=user_counts,
        cross_coefs=cross_coefs,
        n_items=n_items
    )


def generate_user_log(schema: FeatureSchema, params: PlantedParams, user_id: int, seed: int,
                      signal_strength: float) -> dict:
    """
    Génère le sous-journal d'un utilisateur à partir de (seed, user_id)

    Args:
        schema: Schéma des champs
        params: Coefficients tirés par draw_params
        user_id: Utilisateur
        seed: Graine du générateur
        signal_strength: Poids du terme d'historique dans [0, 1]

    Returns:
        Dictionnaire de colonnes numpy
    """
    rng = np.random.default_rng([seed, _USER_STREAM, user_id])
    n = int(params.user_counts[user_id])
    n_fields = len(schema.fields)
    roles = [_role(schema, i) for i in range(n_fields)]

    # profil fixe de l'utilisateur
    profile = np.zeros(n_fields)
    for i, spec in enumerate(schema.fields):
        if roles[i] == 'user':
            profile[i] = _draw_value(rng, spec, 1)[0]
    affinity = rng.standard_normal(params.n_categories)

    start = int(rng.integers(0, START_SPREAD_SECONDS))
    timestamps = start + np.cumsum(rng.integers(MIN_GAP_SECONDS, MAX_GAP_SECONDS, n))
    items = rng.integers(0, params.n_items, n)

    values = np.zeros((n, n_fields))
    for i, spec in enumerate(schema.fields):
        if roles[i] == 'user':
            values[:, i] = profile[i]
        elif roles[i] == 'item':
            values[:, i] = params.item_values[items, i]
        elif roles[i] == 'ctx':
            values[:, i] = _draw_value(rng, spec, n)
    categories = _categories(values, items, params)

    ctx_cats = [i for i in range(n_fields) if roles[i] == 'ctx' and schema.fields[i].is_categorical]
    anchor = values[:, ctx_cats[0]].astype(np.int64) if ctx_cats else np.zeros(n, dtype=np.int64)
    for i, spec in enumerate(schema.fields):
        if roles[i] != 'cross':
            continue
        if spec.is_categorical:
            a, b, c = params.cross_coefs[i]
            values[:, i] = (a * user_id + b * categories + c * anchor) % spec.cardinality
        else:
            raw = affinity[categories] + 0.1 * rng.standard_normal(n)
            values[:, i] = raw.astype(np.float32)

    eta_current = np.zeros(n)
    for i, spec in enumerate(schema.fields):
        w = params.field_weights[i]
        if spec.is_categorical:
            eta_current += w[values[:, i].astype(np.int64)]
        else:
            eta_current += w[0] * values[:, i]

    # kappa[j, c]: empreinte contextuelle de l'impression j vue depuis la catégorie c
    kappa = np.zeros((n, params.n_categories))
    for i, table in params.history_weights.items():
        if schema.fields[i].is_categorical:
            kappa += table[values[:, i].astype(np.int64)]
        else:
            kappa += values[:, i:i + 1] * table[0]

    noise = params.noise_std * rng.standard_normal(n)
    draws = rng.random(n)

    labels = np.zeros(n, dtype=np.uint8)
    psi = np.zeros(n)
    recent = deque(maxlen=params.window)
    for j in range(n):
        if recent:
            psi[j] = np.mean([kappa[h, categories[j]] for h in recent])
        eta = params.bias + eta_current[j] + signal_strength * params.history_scale * psi[j] + noise[j]
        if draws[j] < 1.0 / (1.0 + np.exp(-eta)):
            labels[j] = 1
            recent.append(j)

    return {
        'sample_ids': (np.uint64(user_id) << np.uint64(32)) + np.arange(n, dtype=np.uint64),
        'user_ids': np.full(n, user_id, dtype=np.uint64),
        'item_ids': items.astype(np.uint64),
        'timestamps': timestamps.astype(np.uint64),
        'labels': labels,
        'field_values': values,
        'eta_current': eta_current,
        'psi': psi
    }


def generate_log(schema: FeatureSchema, n_users: int, n_items: int, n_impressions: int, seed: int,
                 signal_strength: float = 1.0) -> ImpressionLog:
    """
    Génère un journal d'impressions reproductible

    Args:
        schema: Schéma des champs
        n_users, n_items, n_impressions: Tailles (>= 1)
        seed: Graine 64 bits
        signal_strength: Poids du signal planté d'historique dans [0, 1]

    Returns:
        ImpressionLog trié par (user_id, timestamp) avec découpage temporel 80/10/10
    """
    if min(n_users, n_items, n_impressions) < 1:
        raise ValueError("n_users, n_items et n_impressions doivent être >= 1")
    if not 0.0 <= signal_strength <= 1.0:
        raise ValueError(f"signal_strength doit être dans [0, 1] (reçu {signal_strength})")

    params = draw_params(schema, n_users, n_items, n_impressions, seed)
    parts = [generate_user_log(schema, params, u, seed, signal_strength) for u in range(n_users)]
    columns = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    columns['field_values'] = columns['field_values'].reshape(-1, len(schema.fields))

    bounds = _split_bounds(columns['timestamps'])
    log = ImpressionLog(
        schema=schema,
        sample_ids=columns['sample_ids'],
        user_ids=columns['user_ids'],
        item_ids=columns['item_ids'],
        timestamps=columns['timestamps'],
        labels=columns['labels'],
        field_values=columns['field_values'],
        generator_seed=seed,
        split_bounds=bounds,
        planted_params=params,
        eta_current=columns['eta_current'],
        psi=columns['psi'],
        signal_strength=signal_strength
    )
    logger.info(
        f"Journal généré: {len(log)} impressions, {n_users} utilisateurs, "
        f"taux de positifs {log.labels.mean():.3f}"
    )
    return log


def _split_bounds(timestamps: np.ndarray) -> tuple[int, int]:
    if timestamps.size == 0:
        return (0, 0)
    cut = np.quantile(timestamps.astype(np.float64), SPLIT_FRACTIONS)
    return int(cut[0]), int(cut[1])


def _record_dtype(schema: FeatureSchema) -> np.dtype:
    columns = [
        ('length', '<u4'), ('sample_id', '<u8'), ('user_id', '<u8'), ('item_id', '<u8'),
        ('timestamp', '<u8'), ('label', 'u1')
    ]
    for i, spec in enumerate(schema.fields):
        columns.append((f'f{i}', '<u4' if spec.is_categorical else '<f4'))
    return np.dtype(columns)


def save_log(log: ImpressionLog, path) -> None:
    """
    Écrit le journal au format binaire SIFL (little-endian, enregistrements préfixés par leur longueur)

    Args:
        log: Journal à écrire
        path: Fichier de sortie
    """
    dtype = _record_dtype(log.schema)
    records = np.zeros(len(log), dtype=dtype)
    records['length'] = dtype.itemsize - 4
    records['sample_id'] = log.sample_ids
    records['user_id'] = log.user_ids
    records['item_id'] = log.item_ids
    records['timestamp'] = log.timestamps
    records['label'] = log.labels
    for i in range(len(log.schema.fields)):
        records[f'f{i}'] = log.field_values[:, i]

    header = LOG_HEADER.pack(LOG_MAGIC, LOG_VERSION, schema_hash(log.schema), len(log),
                             log.generator_seed, *log.split_bounds)
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(records.tobytes())
    logger.info(f"Journal écrit: {path} ({len(log)} enregistrements)")


def load_log(path, schema: FeatureSchema) -> ImpressionLog:
    """
    Relit un journal SIFL

    Args:
        path: Fichier du journal
        schema: Schéma attendu (hash vérifié)

    Returns:
        ImpressionLog sans paramètres plantés

    Raises:
        StoreFormatError: magic, version ou taille incohérents
        SchemaMismatchError: hash de schéma différent
    """
    with open(path, 'rb') as fh:
        data = fh.read()
    if len(data) < LOG_HEADER.size:
        raise StoreFormatError(f"Journal tronqué: {path}")
    magic, version, found_hash, n_samples, seed, b1, b2 = LOG_HEADER.unpack_from(data)
    if magic != LOG_MAGIC or version != LOG_VERSION:
        raise StoreFormatError(f"En-tête de journal invalide: {path}")
    expected = schema_hash(schema)
    if found_hash != expected:
        raise SchemaMismatchError(expected, found_hash, what=str(path))

    dtype = _record_dtype(schema)
    if len(data) != LOG_HEADER.size + n_samples * dtype.itemsize:
        raise StoreFormatError(f"Taille de journal incohérente avec {n_samples} enregistrements: {path}")
    records = np.frombuffer(data, dtype=dtype, count=n_samples, offset=LOG_HEADER.size)
    if n_samples and np.any(records['length'] != dtype.itemsize - 4):
        raise StoreFormatError(f"Préfixe de longueur invalide dans {path}")

    values = np.zeros((n_samples, len(schema.fields)))
    for i in range(len(schema.fields)):
        values[:, i] = records[f'f{i}']
    return ImpressionLog(
        schema=schema,
        sample_ids=records['sample_id'].copy(),
        user_ids=records['user_id'].copy(),
        item_ids=records['item_id'].copy(),
        timestamps=records['timestamp'].copy(),
        labels=records['label'].copy(),
        field_values=values,
        generator_seed=seed,
        split_bounds=(b1, b2)
    )
