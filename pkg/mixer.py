"""
SIF-Mixer

Grille cachée H de forme (b, L+1, T, d_0): la ligne 0 est la requête cible
(projetée par W_res), les lignes 1..L sont les Token Samples de l'historique
(lecture des codebooks + embedding de récence). Chaque SIF Block applique un
mixer de tokens (attention le long d'une ligne), un mixer d'échantillons
(attention le long d'une colonne, padding masqué) et un FFN, tous pre-norm
résiduels.
"""
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from exceptions import CheckpointFormatError, FieldValueError
from features import derive_partition
from models import FeatureSchema, VariantEnum, STANDARD_GROUPS
from utils.binary import pack_header, pack_tensors, unpack_header, unpack_tensors, load_state

logger = logging.getLogger(__name__)

MIXER_MAGIC = b'SIFM'
LAYER_NORM_EPS = 1e-5


class MultiHeadAttention(nn.Module):
    """
    Attention multi-têtes avec projections Q, K, V et de sortie séparées

    Les clés invalides reçoivent un logit -inf avant le softmax.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"Le nombre de têtes ({n_heads}) doit diviser d_0 ({dim})")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None

    def _split(self, x):
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None,
                keep_weights: bool = False) -> torch.Tensor:
        """
        Args:
            x: (batch, longueur, dim)
            key_mask: (batch, longueur) booléen, True = clé valide
            keep_weights: Conserver les poids d'attention dans last_weights

        Returns:
            (batch, longueur, dim)
        """
        batch, length, _ = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        context = (weights @ v).transpose(1, 2).reshape(batch, length, self.dim)
        return self.out(context)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, 4 * dim)
        self.act = nn.ReLU()
        self.linear2 = nn.Linear(4 * dim, dim)


class SIFBlock(nn.Module):
    """
    Un SIF Block

    factored: mixer de tokens (optionnel) puis mixer d'échantillons puis FFN
    flat: une seule attention sur les (L+1)·T positions aplaties puis FFN
    """

    def __init__(self, dim: int, n_heads: int, use_token_mixer: bool = True, flat: bool = False):
        super().__init__()
        self.flat = flat
        self.use_token_mixer = use_token_mixer and not flat
        if flat:
            self.flat_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
            self.flat_mixer = MultiHeadAttention(dim, n_heads)
        else:
            if self.use_token_mixer:
                self.token_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
                self.token_mixer = MultiHeadAttention(dim, n_heads)
            self.sample_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
            self.sample_mixer = MultiHeadAttention(dim, n_heads)
        self.ffn_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.ffn = FeedForward(dim)

    def forward(self, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """
        Args:
            hidden: H (b, R, T, d_0) avec R = L+1
            valid: (b, R) booléen, la ligne 0 est toujours valide

        Returns:
            H de même forme
        """
        if hidden.dim() != 4 or valid.shape != hidden.shape[:2]:
            raise ValueError(f"Forme de H incohérente: {tuple(hidden.shape)} / masque {tuple(valid.shape)}")
        batch, rows, width, dim = hidden.shape

        if self.flat:
            x = hidden.reshape(batch, rows * width, dim)
            mask = valid.repeat_interleave(width, dim=1)
            x = x + self.flat_mixer(self.flat_norm(x), mask)
            hidden = x.reshape(batch, rows, width, dim)
        else:
            if self.use_token_mixer:
                x = hidden.reshape(batch * rows, width, dim)
                hidden = hidden + self.token_mixer(self.token_norm(x)).reshape(batch, rows, width, dim)
            # colonnes: (b·T, R, d_0)
            x = hidden.transpose(1, 2).reshape(batch * width, rows, dim)
            mask = valid.repeat_interleave(width, dim=0)
            mixed = self.sample_mixer(self.sample_norm(x), mask)
            hidden = hidden + mixed.reshape(batch, width, rows, dim).transpose(1, 2)

        return hidden + self.ffn(self.ffn_norm(hidden))


@dataclass
class HistoryBatch:
    """
    Historiques d'un lot, du plus ancien au plus récent, padding après la ligne l

    Attributs:
        values: Valeurs de champs (b, L, F)
        item_ids: (b, L)
        lengths: Longueurs réelles (b,)
        indices: Token Samples lus dans le store (b, L, T, M), None = tokenisation à la volée
    """
    values: np.ndarray
    item_ids: np.ndarray
    lengths: np.ndarray
    indices: np.ndarray | None = None

    @property
    def seq_len(self) -> int:
        return int(self.values.shape[1])

    def valid_mask(self) -> np.ndarray:
        return np.arange(self.seq_len)[None, :] < self.lengths[:, None]


def identifier_fields(schema: FeatureSchema) -> list[int]:
    """Champs identifiants: item_id et groupes singletons dédiés"""
    return [i for i, f in enumerate(schema.fields) if f.name == 'item_id' or f.group not in STANDARD_GROUPS]


def key_field_indices(schema: FeatureSchema, key_fields: int) -> list[int]:
    """Les key_fields premiers champs non identifiants, dans l'ordre de déclaration"""
    excluded = set(identifier_fields(schema))
    return [i for i in range(len(schema.fields)) if i not in excluded][:key_fields]


class SIFMixer(nn.Module):
    """
    MixerState: W_res par slot, embeddings de récence, N SIF Blocks, tête de prédiction

    Les variantes item_id_only, item_plus_key et dense_raw remplacent la lecture des
    codebooks par un encodeur d'historique au niveau de l'item ou de l'échantillon dense.
    """

    def __init__(self, schema: FeatureSchema, variant: VariantEnum | str = VariantEnum.FULL, n_blocks: int = 4,
                 n_heads: int = 8, max_seq_len: int = 1000, n_items: int = 1, dense_dim: int = 512,
                 key_fields: int = 24):
        super().__init__()
        self.schema = schema
        self.variant = VariantEnum(variant)
        self.slots = derive_partition(schema)
        self.n_slots = len(self.slots)
        self.dim = schema.sub_token_dim
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.n_items = n_items
        self.dense_dim = dense_dim
        self.key_fields = key_field_indices(schema, key_fields)

        self.w_res = nn.ModuleList([nn.Linear(slot.raw_width, self.dim, bias=False) for slot in self.slots])
        self.recency = nn.Embedding(max_seq_len + 1, self.n_slots * self.dim)

        width = self.n_slots * self.dim
        if self.variant in (VariantEnum.ITEM_ID_ONLY, VariantEnum.ITEM_PLUS_KEY):
            self.item_embedding = nn.Embedding(max(n_items, 1), self.dim)
        if self.variant is VariantEnum.ITEM_PLUS_KEY:
            key_width = sum(schema.fields[i].embed_dim for i in self.key_fields)
            self.key_proj = nn.Linear(key_width, width)
        if self.variant is VariantEnum.DENSE_RAW:
            raw_total = sum(f.embed_dim for f in schema.fields)
            self.dense_in = nn.Linear(raw_total, dense_dim)
            self.dense_out = nn.Linear(dense_dim, width)

        use_token_mixer = self.variant not in (VariantEnum.ITEM_ID_ONLY, VariantEnum.POOLED)
        self.blocks = nn.ModuleList([
            SIFBlock(self.dim, n_heads, use_token_mixer=use_token_mixer, flat=self.variant is VariantEnum.FLAT_ATTN)
            for _ in range(n_blocks)
        ])
        self.head = nn.Sequential(
            nn.Linear(self.dim, 4 * self.dim),
            nn.ReLU(),
            nn.Linear(4 * self.dim, 1)
        )

    # Construction de H^0

    def embed_target(self, slot_vectors: list[torch.Tensor]) -> torch.Tensor:
        """Ligne 0: W_res^(g,k) f^(g,k)_tau, sans récence, (b, T, d_0)"""
        rows = []
        for t, (layer, f) in enumerate(zip(self.w_res, slot_vectors)):
            if f.shape[-1] != layer.in_features:
                raise FieldValueError(f"Slot {t}: largeur {f.shape[-1]} au lieu de {layer.in_features}")
            rows.append(layer(f))
        return torch.stack(rows, dim=-2)

    def embed_sequence(self, reconstruction: torch.Tensor, lengths, seq_len: int | None = None) -> torch.Tensor:
        """
        Lignes 1..L: reconstruction par slot plus p_{L-l}; lignes au-delà de l mises à zéro

        Args:
            reconstruction: (b, L, T, d_0), lecture des codebooks ou encodeur de variante
            lengths: Longueurs réelles (b,)
            seq_len: L (défaut: reconstruction.shape[1])

        Returns:
            (b, L, T, d_0)
        """
        batch, length = reconstruction.shape[:2]
        seq_len = length if seq_len is None else seq_len
        if seq_len > self.max_seq_len:
            raise ValueError(f"L={seq_len} dépasse L_max={self.max_seq_len}")
        offsets = seq_len - torch.arange(1, length + 1, device=reconstruction.device)
        recency = self.recency(offsets).view(length, self.n_slots, self.dim)
        lengths = torch.as_tensor(np.asarray(lengths), device=reconstruction.device)
        valid = torch.arange(length, device=reconstruction.device)[None, :] < lengths[:, None]
        rows = reconstruction + recency.unsqueeze(0)
        return rows * valid[:, :, None, None].to(rows.dtype)

    def encode_history(self, tokenizer, history: HistoryBatch, sequence_grad: bool = True) -> torch.Tensor:
        """
        Représentation (b, L, T, d_0) des lignes d'historique selon la variante

        Seules les lignes valides sont encodées; le padding reste à zéro.
        """
        batch, length = history.values.shape[:2]
        dtype = tokenizer.codebooks.dtype
        out = torch.zeros(batch, length, self.n_slots, self.dim, dtype=dtype, device=tokenizer.codebooks.device)
        mask = history.valid_mask()
        if not mask.any():
            return out
        flat_mask = torch.as_tensor(mask, device=out.device)

        if self.variant.uses_tokenizer:
            if history.indices is not None:
                encoded = tokenizer.lookup(history.indices[mask])
            else:
                trace = tokenizer.encode(history.values[mask], site='history')
                encoded = trace.straight_through(codebook_grad=sequence_grad)
        elif self.variant is VariantEnum.DENSE_RAW:
            per_field = tokenizer.field_embeddings(history.values[mask])
            dense = self.dense_out(self.dense_in(torch.cat(per_field, dim=-1)))
            encoded = dense.view(-1, self.n_slots, self.dim)
        else:
            items = torch.as_tensor(history.item_ids[mask].astype(np.int64), device=out.device)
            encoded = self.item_embedding(items).unsqueeze(1).expand(-1, self.n_slots, -1)
            if self.variant is VariantEnum.ITEM_PLUS_KEY:
                per_field = tokenizer.field_embeddings(history.values[mask])
                keys = torch.cat([per_field[i] for i in self.key_fields], dim=-1)
                encoded = encoded + self.key_proj(keys).view(-1, self.n_slots, self.dim)

        return out.index_put((flat_mask,), encoded.to(dtype))

    def assemble(self, tokenizer, target_values, history: HistoryBatch,
                 sequence_grad: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """
        H^0 et masque de validité des lignes

        Returns:
            (H (b, L+1, T, d_0), valid (b, L+1))
        """
        target = self.embed_target(tokenizer.embed_fields(target_values))
        encoded = self.encode_history(tokenizer, history, sequence_grad=sequence_grad)
        rows = self.embed_sequence(encoded, history.lengths)
        hidden = torch.cat([target.unsqueeze(1), rows], dim=1)
        valid = np.concatenate([np.ones((len(history.lengths), 1), dtype=bool), history.valid_mask()], axis=1)
        return hidden, torch.as_tensor(valid, device=hidden.device)

    # Backbone

    def sif_block(self, index: int, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.blocks[index](hidden, valid)

    def predict_head(self, hidden: torch.Tensor) -> torch.Tensor:
        """Logit depuis la moyenne des T sorties de la ligne 0"""
        pooled = hidden[:, 0].mean(dim=-2)
        return self.head(pooled).squeeze(-1)

    def forward_factored(self, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        for index in range(len(self.blocks)):
            hidden = self.sif_block(index, hidden, valid)
        return self.predict_head(hidden)

    def forward_flat(self, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if not all(block.flat for block in self.blocks):
            raise ValueError("forward_flat exige la variante flat_attn")
        return self.forward_factored(hidden, valid)

    def forward_pooled(self, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Moyenne des T sous-tokens avant les blocs; grille (b, L+1, 1, d_0)"""
        return self.forward_factored(hidden.mean(dim=-2, keepdim=True), valid)

    def forward(self, hidden: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """
        Logits (b,) pour une grille H^0 déjà assemblée

        y^ = sigma(w_2 ReLU(W_1 h + b_1) + b_2), h = moyenne des T entrées de la ligne 0.
        """
        if self.variant is VariantEnum.POOLED:
            return self.forward_pooled(hidden, valid)
        if self.variant is VariantEnum.FLAT_ATTN:
            return self.forward_flat(hidden, valid)
        return self.forward_factored(hidden, valid)

    def score(self, tokenizer, target_values, history: HistoryBatch) -> torch.Tensor:
        """Probabilités y^ (b,) de bout en bout"""
        hidden, valid = self.assemble(tokenizer, target_values, history)
        return torch.sigmoid(self.forward(hidden, valid))


# N, têtes, L_max, variante, n_items, dense_dim, nombre de champs clés
MIXER_GEOMETRY = struct.Struct('<HHIBIIH')


def save_mixer(mixer: SIFMixer, path) -> None:
    """Checkpoint SIFM: en-tête commun, géométrie du mixer, puis state_dict"""
    geometry = MIXER_GEOMETRY.pack(
        len(mixer.blocks), mixer.n_heads, mixer.max_seq_len, list(VariantEnum).index(mixer.variant),
        mixer.n_items, mixer.dense_dim, len(mixer.key_fields)
    )
    with open(path, 'wb') as fh:
        fh.write(pack_header(MIXER_MAGIC, mixer.schema))
        fh.write(geometry)
        fh.write(pack_tensors(mixer.state_dict().items()))
    logger.info(f"Checkpoint mixer écrit: {path}")


def load_mixer(path, schema: FeatureSchema, dtype: torch.dtype = torch.float32) -> SIFMixer:
    """
    Relit un checkpoint SIFM et reconstruit le mixer

    Raises:
        CheckpointFormatError: fichier illisible ou tenseurs incompatibles
        SchemaMismatchError: checkpoint produit avec un autre schéma
    """
    with open(path, 'rb') as fh:
        data = fh.read()
    _, offset = unpack_header(data, MIXER_MAGIC, schema)
    try:
        n_blocks, n_heads, max_seq_len, variant_code, n_items, dense_dim, n_keys = \
            MIXER_GEOMETRY.unpack_from(data, offset)
        variant = list(VariantEnum)[variant_code]
    except (struct.error, IndexError) as e:
        raise CheckpointFormatError(f"Géométrie du mixer illisible: {str(e)}") from e
    tensors, _ = unpack_tensors(data, offset + MIXER_GEOMETRY.size)

    mixer = SIFMixer(schema, variant=variant, n_blocks=n_blocks, n_heads=n_heads, max_seq_len=max_seq_len,
                     n_items=n_items, dense_dim=dense_dim, key_fields=n_keys).to(dtype)
    load_state(mixer, tensors)
    return mixer


def load_checkpoints(run_dir, schema: FeatureSchema, epoch: str = 'best', dtype: torch.dtype = torch.float32):
    """Couple (tokenizer, mixer) d'un répertoire de run"""
    from tokenizer import load_tokenizer
    tokenizer = load_tokenizer(f"{run_dir}/tokenizer_{epoch}.sifc", schema, dtype=dtype)
    return tokenizer, load_mixer(f"{run_dir}/mixer_{epoch}.sifm", schema, dtype=dtype)
