"""
Token store: fichier clé-valeur trié des Token Samples (chemin de service)

En-tête little-endian: magic "SIFS", version u16, hash de schéma u64, T u16,
M u8, bits par indice u8, nombre d'enregistrements u64.
Enregistrements de taille fixe triés par sample_id: sample_id u64 puis
ceil(T·M·bits / 8) octets d'indices empaquetés.
"""
import logging
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from exceptions import CodecError, SchemaMismatchError, StoreFormatError, UnknownSampleError
from features import n_slots, schema_hash, token_bits
from models import FeatureSchema, TokenSample, VariantEnum

logger = logging.getLogger(__name__)

STORE_MAGIC = b'SIFS'
STORE_VERSION = 1
STORE_HEADER = struct.Struct('<4sHQHBBQ')

SNAPSHOT_SCALAR_BITS = 32
ITEM_ID_BITS = 64


@dataclass(frozen=True)
class StoreHeader:
    schema_hash: int
    n_slots: int
    levels: int
    bits_per_index: int
    count: int
    version: int = STORE_VERSION

    @property
    def record_bytes(self) -> int:
        return packed_size(self.n_slots, self.levels, self.bits_per_index)

    def pack(self) -> bytes:
        return STORE_HEADER.pack(STORE_MAGIC, self.version, self.schema_hash, self.n_slots,
                                 self.levels, self.bits_per_index, self.count)


def packed_size(slots: int, levels: int, bits: int) -> int:
    """ceil(T·M·bits / 8)"""
    return math.ceil(slots * levels * bits / 8)


def pack_many(indices: np.ndarray, bits: int) -> np.ndarray:
    """
    Empaquette un lot (n, T, M) en (n, octets)

    Indices slot par slot puis niveau croissant, chacun sur `bits` bits, bit de poids faible d'abord.

    Raises:
        CodecError: indice négatif ou >= 2^bits
    """
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    flat = indices.reshape(n, int(np.prod(indices.shape[1:])))
    if flat.size and (flat.min() < 0 or flat.max() >= (1 << bits)):
        raise CodecError(f"Indice hors de la largeur de sérialisation ({bits} bits)")
    nbytes = math.ceil(flat.shape[1] * bits / 8)
    if bits == 0:
        return np.zeros((n, 0), dtype=np.uint8)
    bit_planes = ((flat[:, :, None] >> np.arange(bits)) & 1).astype(np.uint8).reshape(n, -1)
    return np.packbits(bit_planes, axis=1, bitorder='little')[:, :nbytes]


def unpack_many(packed: np.ndarray, slots: int, levels: int, bits: int) -> np.ndarray:
    """
    Inverse de pack_many: (n, octets) -> (n, T, M)

    Raises:
        CodecError: taille incorrecte ou bits de remplissage non nuls
    """
    packed = np.asarray(packed, dtype=np.uint8)
    n = packed.shape[0]
    expected = packed_size(slots, levels, bits)
    if packed.ndim != 2 or packed.shape[1] != expected:
        raise CodecError(f"Buffer de {packed.shape[-1] if packed.ndim else 0} octets, {expected} attendus")
    if bits == 0:
        return np.zeros((n, slots, levels), dtype=np.int64)
    count = slots * levels * bits
    bit_planes = np.unpackbits(packed, axis=1, bitorder='little')
    if bit_planes[:, count:].any():
        raise CodecError("Bits de remplissage non nuls")
    weights = 1 << np.arange(bits, dtype=np.int64)
    values = bit_planes[:, :count].reshape(n, slots * levels, bits).astype(np.int64) @ weights
    return values.reshape(n, slots, levels)


def pack(sample: TokenSample, bits: int) -> bytes:
    """Token Sample -> octets"""
    return pack_many(sample.indices[None], bits)[0].tobytes()


def unpack(buffer: bytes, slots: int, levels: int, bits: int) -> TokenSample:
    """Octets -> Token Sample"""
    array = np.frombuffer(buffer, dtype=np.uint8)
    return TokenSample(unpack_many(array[None], slots, levels, bits)[0])


def record_dtype(record_bytes: int) -> np.dtype:
    return np.dtype([('sample_id', '<u8'), ('packed', 'u1', (record_bytes,))])


def build_store(log, tokenizer, path, batch_size: int = 4096) -> StoreHeader:
    """
    Tokenise tous les positifs du journal avec un tokenizer figé et écrit le store

    L'en-tête est écrit en dernier: un fichier interrompu garde un magic nul.

    Raises:
        SchemaMismatchError: tokenizer et journal issus de schémas différents
    """
    expected = schema_hash(log.schema)
    found = schema_hash(tokenizer.schema)
    if expected != found:
        raise SchemaMismatchError(expected, found, what="tokenizer")

    schema = tokenizer.schema
    header = StoreHeader(schema_hash=found, n_slots=n_slots(schema), levels=schema.rvq_levels,
                         bits_per_index=schema.bits_per_index, count=0)
    rows = np.flatnonzero(log.labels == 1)
    rows = rows[np.argsort(log.sample_ids[rows], kind='stable')]

    tokenizer.eval()
    with open(path, 'wb') as fh:
        fh.write(b'\x00' * STORE_HEADER.size)
        for start in range(0, rows.size, batch_size):
            chunk = rows[start:start + batch_size]
            records = np.zeros(chunk.size, dtype=record_dtype(header.record_bytes))
            records['sample_id'] = log.sample_ids[chunk]
            records['packed'] = pack_many(tokenizer.tokenize_batch(log.field_values[chunk]),
                                          header.bits_per_index)
            fh.write(records.tobytes())
        fh.flush()
        header = replace(header, count=int(rows.size))
        fh.seek(0)
        fh.write(header.pack())
    logger.info(f"Token store écrit: {path} ({header.count} enregistrements, {header.record_bytes} octets/Token Sample)")
    return header


class TokenStore:
    """
    Lecture seule d'un token store (memmap + recherche dichotomique)

    Usage:
        with TokenStore(path, schema) as store:
            sample = store.lookup(sample_id)
    """

    def __init__(self, path, schema: FeatureSchema | None = None):
        self.path = path
        with open(path, 'rb') as fh:
            raw = fh.read(STORE_HEADER.size)
        if len(raw) < STORE_HEADER.size:
            raise StoreFormatError(f"Store tronqué: {path}")
        magic, version, found_hash, slots, levels, bits, count = STORE_HEADER.unpack(raw)
        if magic != STORE_MAGIC:
            raise StoreFormatError(f"Store incomplet ou invalide (magic {magic!r}): {path}")
        if version != STORE_VERSION:
            raise StoreFormatError(f"Version de store non supportée: {version}")
        self.header = StoreHeader(found_hash, slots, levels, bits, count, version)

        if schema is not None:
            expected = schema_hash(schema)
            if expected != found_hash:
                raise SchemaMismatchError(expected, found_hash, what=str(path))

        dtype = record_dtype(self.header.record_bytes)
        expected_size = STORE_HEADER.size + count * dtype.itemsize
        if os.path.getsize(path) != expected_size:
            raise StoreFormatError(
                f"Taille du store incohérente: {os.path.getsize(path)} octets, {expected_size} attendus"
            )
        if count:
            self._records = np.memmap(path, dtype=dtype, mode='r', offset=STORE_HEADER.size, shape=(count,))
        else:
            self._records = np.zeros(0, dtype=dtype)
        self._keys = self._records['sample_id']

    def __len__(self):
        return self.header.count

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._records = None
        self._keys = None

    def __contains__(self, sample_id):
        return self._position(sample_id) is not None

    def _position(self, sample_id):
        pos = int(np.searchsorted(self._keys, np.uint64(sample_id)))
        if pos < self.header.count and int(self._keys[pos]) == int(sample_id):
            return pos
        return None

    def lookup(self, sample_id) -> TokenSample | None:
        """Token Sample d'un sample_id, None si absent"""
        pos = self._position(sample_id)
        if pos is None:
            return None
        packed = np.asarray(self._records['packed'][pos:pos + 1])
        return TokenSample(unpack_many(packed, self.header.n_slots, self.header.levels,
                                       self.header.bits_per_index)[0])

    def lookup_many(self, sample_ids) -> np.ndarray:
        """
        Indices (n, T, M) d'une liste de sample_id

        Raises:
            UnknownSampleError: un identifiant est absent du store
        """
        sample_ids = np.asarray(sample_ids, dtype=np.uint64)
        if sample_ids.size == 0:
            return np.zeros((0, self.header.n_slots, self.header.levels), dtype=np.int64)
        positions = np.searchsorted(self._keys, sample_ids)
        positions = np.minimum(positions, max(self.header.count - 1, 0))
        if self.header.count == 0 or np.any(self._keys[positions] != sample_ids):
            missing = sample_ids if self.header.count == 0 else sample_ids[self._keys[positions] != sample_ids]
            raise UnknownSampleError(int(missing[0]))
        packed = np.asarray(self._records['packed'][positions])
        return unpack_many(packed, self.header.n_slots, self.header.levels, self.header.bits_per_index)

    def sample_ids(self) -> np.ndarray:
        return np.asarray(self._keys)


def compression_report(schema: FeatureSchema, variant, key_fields: int = 24, dense_dim: int = 512) -> dict:
    """
    Bits par échantillon et taux de compression par rapport à l'instantané brut

    b_snapshot = somme des embed_dim x 32 (|F| x d_e x 32 à largeur uniforme)

    Returns:
        {'variant', 'snapshot_bits', 'bits_per_sample', 'ratio'}
    """
    variant = VariantEnum(variant)
    snapshot = sum(f.embed_dim for f in schema.fields) * SNAPSHOT_SCALAR_BITS
    if variant.uses_tokenizer:
        bits = token_bits(schema)
    elif variant is VariantEnum.ITEM_ID_ONLY:
        bits = ITEM_ID_BITS
    elif variant is VariantEnum.ITEM_PLUS_KEY:
        bits = ITEM_ID_BITS + key_fields * SNAPSHOT_SCALAR_BITS
    else:
        bits = dense_dim * SNAPSHOT_SCALAR_BITS
    return {
        'variant': variant.value,
        'snapshot_bits': snapshot,
        'bits_per_sample': bits,
        'ratio': snapshot / bits if bits else float('inf')
    }
