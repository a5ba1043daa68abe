"""
Exceptions du pipeline SIF

Toutes les erreurs métier dérivent de SIFError, ce qui permet à la CLI
de les convertir en code de sortie 1 sans attraper les bugs.
"""


class SIFError(Exception):
    """Erreur de base du pipeline"""


class SchemaError(SIFError, ValueError):
    """Schéma de features invalide (groupe vide, B <= 0, clé inconnue, etc.)"""


class FieldValueError(SIFError, ValueError):
    """Valeur de champ hors domaine (catégorie >= cardinalité, largeur incorrecte)"""


class UnknownSampleError(SIFError, KeyError):
    """sample_id absent du journal d'impressions"""

    def __init__(self, sample_id):
        self.sample_id = sample_id
        super().__init__(f"sample_id inconnu: {sample_id}")


class CodecError(SIFError, ValueError):
    """Buffer tronqué ou indice trop grand pour la largeur de sérialisation"""


class StoreFormatError(SIFError):
    """Fichier binaire (log, store) corrompu ou incomplet"""


class CheckpointFormatError(SIFError):
    """Checkpoint illisible ou incompatible avec la configuration"""


class SchemaMismatchError(SIFError):
    """Hash de schéma différent entre deux artefacts"""

    def __init__(self, expected: int, found: int, what: str = "artefact"):
        self.expected = expected
        self.found = found
        super().__init__(
            f"Hash de schéma incompatible pour {what}: "
            f"attendu {expected:#018x}, trouvé {found:#018x}"
        )


class UndefinedMetricError(SIFError, ValueError):
    """Métrique non définie (une seule classe présente, aucun groupe utilisable)"""


class TrainingDivergedError(SIFError):
    """Perte non finie pendant un pas d'entraînement"""

    def __init__(self, component: str, value: float):
        self.component = component
        self.value = value
        super().__init__(f"Divergence détectée sur {component} (valeur={value})")
