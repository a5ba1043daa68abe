"""
Conteneur binaire des checkpoints (tokenizer SIFC, mixer SIFM)

En-tête commun little-endian:
    magic 4 octets, version u16, hash de schéma u64, G u8, K_g u16 par groupe,
    d_0 u16, M u8, V u32
Suivent un u32 (nombre de tenseurs) puis chaque tenseur nommé:
    longueur du nom u16, nom utf-8, ndim u8, dimensions u32, données f32
"""
import struct

import numpy as np
import torch

from exceptions import CheckpointFormatError, SchemaMismatchError
from features import group_counts, schema_hash
from models import FeatureSchema

CONTAINER_VERSION = 1

_PREFIX = struct.Struct('<4sHQB')
_SUFFIX = struct.Struct('<HBI')
_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')


def pack_header(magic: bytes, schema: FeatureSchema) -> bytes:
    """En-tête commun décrivant la géométrie HGAQ du schéma"""
    counts = list(group_counts(schema).values())
    out = bytearray(_PREFIX.pack(magic, CONTAINER_VERSION, schema_hash(schema), len(counts)))
    for k in counts:
        out += _U16.pack(k)
    out += _SUFFIX.pack(schema.sub_token_dim, schema.rvq_levels, schema.codebook_size)
    return bytes(out)


def unpack_header(data: bytes, magic: bytes, schema: FeatureSchema | None = None) -> tuple[dict, int]:
    """
    Lit et vérifie l'en-tête commun

    Args:
        data: Contenu du fichier
        magic: Magic attendu
        schema: Schéma attendu (None = pas de vérification)

    Returns:
        (champs de l'en-tête, position après l'en-tête)

    Raises:
        CheckpointFormatError: magic, version ou géométrie incohérents
        SchemaMismatchError: hash de schéma différent
    """
    try:
        found_magic, version, found_hash, n_groups = _PREFIX.unpack_from(data, 0)
        offset = _PREFIX.size
        counts = [_U16.unpack_from(data, offset + 2 * i)[0] for i in range(n_groups)]
        offset += 2 * n_groups
        d0, levels, size = _SUFFIX.unpack_from(data, offset)
        offset += _SUFFIX.size
    except struct.error as e:
        raise CheckpointFormatError(f"En-tête tronqué: {str(e)}") from e

    if found_magic != magic:
        raise CheckpointFormatError(f"Magic inattendu {found_magic!r} (attendu {magic!r})")
    if version != CONTAINER_VERSION:
        raise CheckpointFormatError(f"Version de conteneur non supportée: {version}")

    header = {
        'schema_hash': found_hash,
        'group_counts': counts,
        'sub_token_dim': d0,
        'rvq_levels': levels,
        'codebook_size': size
    }
    if schema is not None:
        expected = schema_hash(schema)
        if found_hash != expected:
            raise SchemaMismatchError(expected, found_hash, what="checkpoint")
        if counts != list(group_counts(schema).values()) or (d0, levels, size) != (
                schema.sub_token_dim, schema.rvq_levels, schema.codebook_size):
            raise CheckpointFormatError("Géométrie HGAQ du checkpoint différente de celle du schéma")
    return header, offset


def pack_tensors(named) -> bytes:
    """Sérialise une suite (nom, tenseur) en f32 little-endian"""
    named = list(named)
    out = bytearray(_U32.pack(len(named)))
    for name, tensor in named:
        array = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        encoded = name.encode('utf-8')
        out += _U16.pack(len(encoded)) + encoded
        out += struct.pack(f'<B{array.ndim}I', array.ndim, *array.shape)
        out += np.ascontiguousarray(array, dtype='<f4').tobytes()
    return bytes(out)


def unpack_tensors(data: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    """
    Relit les tenseurs nommés

    Returns:
        ({nom: tableau float32}, position finale)

    Raises:
        CheckpointFormatError: buffer tronqué
    """
    tensors = {}
    try:
        (count,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        for _ in range(count):
            (length,) = _U16.unpack_from(data, offset)
            offset += _U16.size
            name = bytes(data[offset:offset + length]).decode('utf-8')
            offset += length
            (ndim,) = struct.unpack_from('<B', data, offset)
            offset += 1
            shape = struct.unpack_from(f'<{ndim}I', data, offset)
            offset += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * n > len(data):
                raise CheckpointFormatError(f"Tenseur '{name}' tronqué")
            tensors[name] = np.frombuffer(data, dtype='<f4', count=n, offset=offset).reshape(shape).copy()
            offset += 4 * n
    except struct.error as e:
        raise CheckpointFormatError(f"Liste de tenseurs tronquée: {str(e)}") from e
    return tensors, offset


def load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Copie les tenseurs relus dans le state_dict du module (noms et formes stricts)"""
    state = module.state_dict()
    missing = set(state) - set(tensors)
    unexpected = set(tensors) - set(state)
    if missing or unexpected:
        raise CheckpointFormatError(
            f"Tenseurs incompatibles (manquants: {sorted(missing)}, inattendus: {sorted(unexpected)})"
        )
    for name, target in state.items():
        if tuple(target.shape) != tensors[name].shape:
            raise CheckpointFormatError(
                f"Forme de '{name}': {tensors[name].shape} au lieu de {tuple(target.shape)}"
            )
    module.load_state_dict({
        name: torch.as_tensor(array, dtype=state[name].dtype) for name, array in tensors.items()
    })
