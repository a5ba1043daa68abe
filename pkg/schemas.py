"""
Schémas de validation du pipeline SIF
Utilise Marshmallow pour valider le fichier de schéma de features et la configuration d'exécution
"""
from marshmallow import Schema, fields, validate, validates_schema, ValidationError, post_load, RAISE

from models import FieldKindEnum, FieldSpec, FeatureSchema, VariantEnum


class EnumField(fields.Field):
    """Champ personnalisé pour gérer les enums"""

    def __init__(self, enum_class, *args, **kwargs):
        self.enum_class = enum_class
        super().__init__(*args, **kwargs)

    def _serialize(self, value, attr, obj, **kwargs):
        """Convertit l'enum en string pour la sérialisation"""
        if value is None:
            return None
        if isinstance(value, self.enum_class):
            return value.value
        return value

    def _deserialize(self, value, attr, data, **kwargs):
        """Convertit le string en enum pour la désérialisation"""
        try:
            if isinstance(value, str):
                return self.enum_class(value)
            return value
        except ValueError:
            valid = ', '.join(e.value for e in self.enum_class)
            raise ValidationError(f"Valeur invalide pour {self.enum_class.__name__} (attendu: {valid})")


class FieldSpecSchema(Schema):
    """
    Schéma d'un champ du fichier de schéma
    """
    class Meta:
        unknown = RAISE

    name = fields.Str(required=True, validate=validate.Length(min=1, max=128))
    group = fields.Str(required=True, validate=validate.Length(min=1, max=64))
    kind = EnumField(FieldKindEnum, required=True)
    cardinality = fields.Int(allow_none=True, load_default=None)
    embed_dim = fields.Int(load_default=8, validate=validate.Range(min=1))

    @validates_schema
    def validate_cardinality(self, data, **kwargs):
        """Valide la cardinalité des champs catégoriels"""
        if data.get('kind') is FieldKindEnum.CATEGORICAL:
            cardinality = data.get('cardinality')
            if cardinality is None or cardinality < 2:
                raise ValidationError("Un champ catégoriel exige cardinality >= 2", 'cardinality')

    @post_load
    def make_field(self, data, **kwargs):
        return FieldSpec(**data)


class FeatureSchemaFileSchema(Schema):
    """
    Schéma du fichier JSON de features

    Clés: fields, granularity (B), sub_token_dim (d_0), rvq_levels (M),
    codebook_size (V), groups (optionnel)
    """
    class Meta:
        unknown = RAISE

    field_specs = fields.List(
        fields.Nested(FieldSpecSchema),
        required=True,
        data_key='fields',
        validate=validate.Length(min=1, error="Au moins un champ est requis")
    )
    granularity = fields.Int(load_default=32)
    sub_token_dim = fields.Int(load_default=16, validate=validate.Range(min=1))
    rvq_levels = fields.Int(load_default=3, validate=validate.Range(min=1))
    codebook_size = fields.Int(load_default=256, validate=validate.Range(min=1, max=65536))
    groups = fields.List(fields.Str(), load_default=None)

    @post_load
    def make_schema(self, data, **kwargs):
        data['fields'] = tuple(data.pop('field_specs'))
        if data.get('groups') is not None:
            data['groups'] = tuple(data['groups'])
        return FeatureSchema(**data)


class RunConfigSchema(Schema):
    """
    Schéma de la configuration d'exécution (fichier KEY=VALUE + flags)

    Toutes les clés sont optionnelles: les valeurs absentes gardent celles du profil.
    """
    class Meta:
        unknown = RAISE

    variant = fields.Str(validate=validate.OneOf([v.value for v in VariantEnum]))
    seed = fields.Int(validate=validate.Range(min=0))
    schema = fields.Str()
    data = fields.Str()
    out = fields.Str()
    granularity = fields.Int(validate=validate.Range(min=1))
    sub_token_dim = fields.Int(validate=validate.Range(min=1))
    rvq_levels = fields.Int(validate=validate.Range(min=1))
    codebook_size = fields.Int(validate=validate.Range(min=1, max=65536))
    commitment = fields.Float(validate=validate.Range(min=0))
    n_blocks = fields.Int(validate=validate.Range(min=1))
    n_heads = fields.Int(validate=validate.Range(min=1))
    seq_len = fields.Int(validate=validate.Range(min=0))
    dense_dim = fields.Int(validate=validate.Range(min=1))
    key_fields = fields.Int(validate=validate.Range(min=1))
    beta_vq = fields.Float(validate=validate.Range(min=0))
    gamma_align = fields.Float(validate=validate.Range(min=0))
    token_weight = fields.Float(validate=validate.Range(min=0))
    codebook_loss = fields.Bool()
    aux_route = fields.Bool()
    sequence_route = fields.Bool()
    lr = fields.Float(validate=validate.Range(min=0))
    adam_beta1 = fields.Float(validate=validate.Range(min=0, max=1))
    adam_beta2 = fields.Float(validate=validate.Range(min=0, max=1))
    adam_eps = fields.Float(validate=validate.Range(min=0))
    weight_decay = fields.Float(validate=validate.Range(min=0))
    batch_size = fields.Int(validate=validate.Range(min=1))
    max_epochs = fields.Int(validate=validate.Range(min=1))
    max_batches_per_epoch = fields.Int(validate=validate.Range(min=0))
    patience = fields.Int(validate=validate.Range(min=1))
    zero_row_epochs = fields.Int(validate=validate.Range(min=0))
    reseed_dead_codes = fields.Bool()
    shards = fields.Int(validate=validate.Range(min=1))
    dtype = fields.Str(validate=validate.OneOf(['float32', 'float64']))
    deterministic = fields.Bool()
    strata_edges = fields.Str()


# Instances des schémas pour réutilisation
feature_schema_file_schema = FeatureSchemaFileSchema()
run_config_schema = RunConfigSchema()
