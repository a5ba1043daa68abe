"""
Sample Tokenizer: Raw Sample -> Token Sample

embed_fields -> project (W_proj par slot, sans biais) -> quantification
résiduelle à M niveaux, plus la tête auxiliaire pCTR supervisée par le label.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from exceptions import CodecError, FieldValueError
from features import derive_partition
from models import FeatureSchema, RawSample, TokenSample
from utils.binary import pack_header, pack_tensors, unpack_header, unpack_tensors, load_state
from utils.freeze import frozen_indices, stop_gradient

logger = logging.getLogger(__name__)

TOKENIZER_MAGIC = b'SIFC'


@dataclass
class QuantizationTrace:
    """
    Trace complète de la quantification d'un lot

    Attributs:
        projected: z~ (b, T, d_0)
        residuals: r^(m) pour m = 1..M, chacun (b, T, d_0)
        codes: c_q^(m) sélectionnés, chacun (b, T, d_0)
        reconstruction: s^ = somme des codes (b, T, d_0)
        indices: (b, T, M)
    """
    projected: torch.Tensor
    residuals: list
    codes: list
    reconstruction: torch.Tensor
    indices: torch.Tensor
    site: str = 'q'

    def token_samples(self) -> list[TokenSample]:
        array = self.indices.detach().cpu().numpy()
        return [TokenSample(a) for a in array]

    def straight_through(self, codebook_grad: bool = True) -> torch.Tensor:
        """
        s^ en avant, identité vers z~ en arrière

        Args:
            codebook_grad: False = aucun gradient vers les codes par ce chemin
        """
        z = self.projected
        recon = self.reconstruction
        if not codebook_grad:
            recon = stop_gradient(recon, f"{self.site}/recon")
        return recon + (z - stop_gradient(z, f"{self.site}/z"))


def as_values(samples) -> np.ndarray:
    """Convertit un RawSample, une liste de RawSample ou un tableau en matrice (b, F)"""
    if isinstance(samples, RawSample):
        return np.asarray([samples.field_values], dtype=np.float64)
    if isinstance(samples, (list, tuple)) and samples and isinstance(samples[0], RawSample):
        return np.asarray([s.field_values for s in samples], dtype=np.float64)
    values = np.asarray(samples, dtype=np.float64)
    return values.reshape(1, -1) if values.ndim == 1 else values


class SampleTokenizer(nn.Module):
    """
    TokenizerState: embedders de champs, W_proj par slot, T x M codebooks, tête auxiliaire

    Les codebooks sont stockés dans un seul paramètre (T, M, V, d_0).
    """

    def __init__(self, schema: FeatureSchema, commitment: float = 0.25):
        super().__init__()
        self.schema = schema
        self.slots = derive_partition(schema)
        self.n_slots = len(self.slots)
        self.levels = schema.rvq_levels
        self.codebook_size = schema.codebook_size
        self.dim = schema.sub_token_dim
        self.commitment = commitment

        self.field_embedders = nn.ModuleList([
            nn.Embedding(spec.cardinality, spec.embed_dim) if spec.is_categorical else nn.Linear(1, spec.embed_dim)
            for spec in schema.fields
        ])
        self.proj = nn.ModuleList([nn.Linear(slot.raw_width, self.dim, bias=False) for slot in self.slots])

        bound = 1.0 / math.sqrt(self.dim)
        codebooks = torch.empty(self.n_slots, self.levels, self.codebook_size, self.dim).uniform_(-bound, bound)
        codebooks[:, :, 0] = 0.0
        self.codebooks = nn.Parameter(codebooks)

        hidden = 4 * self.n_slots * self.dim
        self.aux_head = nn.Sequential(
            nn.Linear(self.n_slots * self.dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1)
        )

        self.pin_zero_row = True
        self.track_usage = False
        self.reset_usage()

    # Encodage des champs

    def _check_values(self, values: np.ndarray) -> None:
        if values.ndim != 2 or values.shape[1] != len(self.schema.fields):
            raise FieldValueError(
                f"{len(self.schema.fields)} valeurs de champ attendues, forme reçue {values.shape}"
            )
        for i, spec in enumerate(self.schema.fields):
            if not spec.is_categorical:
                continue
            column = values[:, i]
            bad = (column < 0) | (column >= spec.cardinality) | (column != np.floor(column))
            if bad.any():
                raise FieldValueError(
                    f"Champ '{spec.name}': valeur {column[bad][0]} hors de [0, {spec.cardinality})"
                )

    def field_embeddings(self, samples) -> list[torch.Tensor]:
        """Embedding brut de chaque champ, (b, d_e) par champ"""
        values = as_values(samples)
        self._check_values(values)
        dtype = self.codebooks.dtype
        tensor = torch.as_tensor(values, dtype=dtype, device=self.codebooks.device)
        out = []
        for i, spec in enumerate(self.schema.fields):
            if spec.is_categorical:
                out.append(self.field_embedders[i](tensor[:, i].long()))
            else:
                out.append(self.field_embedders[i](tensor[:, i:i + 1]))
        return out

    def embed_fields(self, samples) -> list[torch.Tensor]:
        """
        Vecteurs bruts f^(g,k) par slot

        Args:
            samples: RawSample, liste de RawSample ou matrice (b, F)

        Returns:
            T tenseurs (b, raw_width), concaténation des embeddings dans l'ordre des champs

        Raises:
            FieldValueError: valeur catégorielle hors domaine
        """
        per_field = self.field_embeddings(samples)
        return [torch.cat([per_field[i] for i in slot.field_indices], dim=-1) for slot in self.slots]

    def project(self, slot_vectors: list[torch.Tensor]) -> torch.Tensor:
        """z~^(g,k) = W_proj^(g,k) f^(g,k), empilés en (b, T, d_0)"""
        if len(slot_vectors) != self.n_slots:
            raise FieldValueError(f"{self.n_slots} slots attendus, {len(slot_vectors)} reçus")
        projected = []
        for t, (layer, f) in enumerate(zip(self.proj, slot_vectors)):
            if f.shape[-1] != layer.in_features:
                raise FieldValueError(
                    f"Slot {t}: largeur {f.shape[-1]} au lieu de {layer.in_features}"
                )
            projected.append(layer(f))
        return torch.stack(projected, dim=-2)

    # Quantification

    def _gather(self, level: int, indices: torch.Tensor) -> torch.Tensor:
        # codebooks[t, level, indices[b, t]] -> (b, T, d_0)
        slots = torch.arange(self.n_slots, device=indices.device)
        return self.codebooks[slots.unsqueeze(0), level, indices]

    def quantize(self, projected: torch.Tensor, site: str = 'q') -> QuantizationTrace:
        """
        Quantification résiduelle gloutonne, niveau par niveau

        r^(1) = z~, q^(m) = argmin_v ||r^(m) - c_v||, r^(m+1) = r^(m) - c_q^(m).
        Les égalités sont départagées par le plus petit indice.

        Args:
            projected: z~ (b, T, d_0)
            site: Préfixe des clés de gel (plusieurs appels dans une même perte)

        Returns:
            QuantizationTrace
        """
        residual = projected
        residuals, codes, indices = [], [], []
        for m in range(self.levels):
            with torch.no_grad():
                book = self.codebooks[:, m].detach()
                distances = ((residual.detach().unsqueeze(-2) - book.unsqueeze(0)) ** 2).sum(-1)
                fresh = distances.argmin(dim=-1)
            chosen = frozen_indices(fresh, f"{site}/level{m}")
            code = self._gather(m, chosen)

            residuals.append(residual)
            codes.append(code)
            indices.append(chosen)
            if self.track_usage:
                self._record_usage(m, chosen, residual)
            residual = residual - stop_gradient(code, f"{site}/code{m}")

        return QuantizationTrace(
            projected=projected,
            residuals=residuals,
            codes=codes,
            reconstruction=torch.stack(codes, dim=0).sum(dim=0),
            indices=torch.stack(indices, dim=-1),
            site=site
        )

    def encode(self, samples, site: str = 'q') -> QuantizationTrace:
        """embed_fields -> project -> quantize"""
        return self.quantize(self.project(self.embed_fields(samples)), site=site)

    def tokenize(self, sample: RawSample) -> TokenSample:
        """Token Sample (T, M) d'un Raw Sample"""
        return TokenSample(self.tokenize_batch(sample)[0])

    @torch.no_grad()
    def tokenize_batch(self, samples) -> np.ndarray:
        """Indices (b, T, M) pour un lot, sans suivi d'usage"""
        tracking, self.track_usage = self.track_usage, False
        try:
            trace = self.encode(samples, site='tokenize')
        finally:
            self.track_usage = tracking
        return trace.indices.cpu().numpy().astype(np.int64)

    def lookup(self, indices) -> torch.Tensor:
        """
        Reconstruction par lecture des codebooks: somme sur m de c^(g,k,m)_q

        Args:
            indices: (..., T, M) entiers

        Returns:
            (..., T, d_0)

        Raises:
            CodecError: indice >= V
        """
        indices = torch.as_tensor(np.asarray(indices), dtype=torch.long, device=self.codebooks.device)
        if indices.shape[-2:] != (self.n_slots, self.levels):
            raise CodecError(f"Indices de forme {tuple(indices.shape)}, attendu (..., {self.n_slots}, {self.levels})")
        if indices.numel() and (int(indices.max()) >= self.codebook_size or int(indices.min()) < 0):
            raise CodecError(f"Indice hors de [0, {self.codebook_size})")
        lead = indices.shape[:-2]
        flat = indices.reshape(-1, self.n_slots, self.levels)
        total = sum(self._gather(m, flat[..., m]) for m in range(self.levels))
        return total.reshape(*lead, self.n_slots, self.dim)

    # Tête auxiliaire et pertes

    def aux_logit(self, trace: QuantizationTrace, codebook_grad: bool = True) -> torch.Tensor:
        recon = trace.straight_through(codebook_grad=codebook_grad)
        return self.aux_head(recon.flatten(start_dim=-2)).squeeze(-1)

    def aux_predict(self, trace: QuantizationTrace) -> torch.Tensor:
        """y^token = sigma(MLP(s^)), dans (0, 1)"""
        return torch.sigmoid(self.aux_logit(trace))

    def vq_loss(self, trace: QuantizationTrace, codebook_term: bool = True) -> torch.Tensor:
        """
        L_VQ = somme sur slots et niveaux de ||sg(r) - c||^2 + lambda ||r - sg(c)||^2

        Moyenne sur le lot.
        """
        total = trace.projected.new_zeros(())
        for m, (residual, code) in enumerate(zip(trace.residuals, trace.codes)):
            commit = (residual - stop_gradient(code, f"{trace.site}/vq_c{m}")) ** 2
            total = total + self.commitment * commit.sum(dim=(-2, -1)).mean()
            if codebook_term:
                pull = (stop_gradient(residual, f"{trace.site}/vq_r{m}") - code) ** 2
                total = total + pull.sum(dim=(-2, -1)).mean()
        return total

    def tokenizer_losses(self, samples, labels, codebook_term: bool = True, aux_codebook_grad: bool = True,
                         site: str = 'target') -> tuple[torch.Tensor, torch.Tensor, QuantizationTrace]:
        """
        (L_token, L_VQ) sur un lot de Raw Samples

        La trace de quantification des cibles est renvoyée en troisième position pour
        que L_align réutilise la même reconstruction (et les mêmes indices gelés).

        Args:
            samples: Raw Samples du lot
            labels: y (b,)
            codebook_term: Inclure le terme codebook de L_VQ
            aux_codebook_grad: Laisser la tête auxiliaire mettre à jour les codes

        Returns:
            (L_token, L_VQ, trace): deux pertes scalaires et la QuantizationTrace du lot
        """
        trace = self.encode(samples, site=site)
        target = torch.as_tensor(np.asarray(labels), dtype=trace.projected.dtype, device=trace.projected.device)
        token_loss = F.binary_cross_entropy_with_logits(
            self.aux_logit(trace, codebook_grad=aux_codebook_grad), target.reshape(-1)
        )
        return token_loss, self.vq_loss(trace, codebook_term=codebook_term), trace

    # Entretien des codebooks

    def reset_usage(self) -> None:
        self.code_usage = np.zeros((self.n_slots, self.levels, self.codebook_size), dtype=np.int64)
        self._recent_residuals = [None] * self.levels

    def _record_usage(self, level: int, chosen: torch.Tensor, residual: torch.Tensor) -> None:
        flat = (chosen.detach().cpu().numpy() + np.arange(self.n_slots) * self.codebook_size).ravel()
        counts = np.bincount(flat, minlength=self.n_slots * self.codebook_size)
        self.code_usage[:, level] += counts.reshape(self.n_slots, self.codebook_size)
        self._recent_residuals[level] = residual.detach().reshape(-1, self.n_slots, self.dim)

    @torch.no_grad()
    def enforce_zero_rows(self) -> None:
        """Remet la ligne 0 de chaque codebook à zéro tant qu'elle est épinglée"""
        if self.pin_zero_row:
            self.codebooks[:, :, 0] = 0.0

    @torch.no_grad()
    def reseed_dead_codes(self, generator: torch.Generator | None = None) -> int:
        """
        Réinitialise les codes jamais sélectionnés depuis le dernier reset_usage()

        Chaque code mort reçoit un résidu aléatoire du dernier lot vu au même niveau.

        Returns:
            Nombre de codes réinitialisés
        """
        reseeded = 0
        first = 1 if self.pin_zero_row else 0
        for m in range(self.levels):
            pool = self._recent_residuals[m]
            if pool is None or pool.shape[0] == 0:
                continue
            for t in range(self.n_slots):
                dead = np.flatnonzero(self.code_usage[t, m, first:] == 0) + first
                if dead.size == 0:
                    continue
                picks = torch.randint(pool.shape[0], (dead.size,), generator=generator)
                self.codebooks[t, m, torch.as_tensor(dead)] = pool[picks, t].to(self.codebooks.dtype)
                reseeded += int(dead.size)
        if reseeded:
            logger.warning(f"{reseeded} codes morts réinitialisés")
        self.reset_usage()
        return reseeded


def save_tokenizer(tokenizer: SampleTokenizer, path) -> None:
    """Checkpoint SIFC: en-tête commun puis state_dict (embedders, W_proj, codebooks, tête)"""
    with open(path, 'wb') as fh:
        fh.write(pack_header(TOKENIZER_MAGIC, tokenizer.schema))
        fh.write(pack_tensors(tokenizer.state_dict().items()))
    logger.info(f"Checkpoint tokenizer écrit: {path}")


def load_tokenizer(path, schema: FeatureSchema, dtype: torch.dtype = torch.float32,
                   commitment: float = 0.25) -> SampleTokenizer:
    """
    Relit un checkpoint SIFC

    Raises:
        CheckpointFormatError: fichier illisible
        SchemaMismatchError: checkpoint produit avec un autre schéma
    """
    with open(path, 'rb') as fh:
        data = fh.read()
    _, offset = unpack_header(data, TOKENIZER_MAGIC, schema)
    tensors, _ = unpack_tensors(data, offset)
    tokenizer = SampleTokenizer(schema, commitment=commitment).to(dtype)
    load_state(tokenizer, tensors)
    tokenizer.pin_zero_row = False
    return tokenizer
