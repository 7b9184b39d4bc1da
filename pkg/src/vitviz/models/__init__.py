from .adapter import (
    REGISTRY,
    AttentionSurgeryPlan,
    ClassifierHandle,
    FeatureLocator,
    ModelSpec,
    PatchActivationGrid,
    TokenReadout,
    ViTHandle,
    describe_model,
    load_model,
    require_vit,
    wrap_classifier,
    wrap_vit,
)
from .vit import SITES, ViTConfig, VisionTransformer

__all__ = [
    "REGISTRY", "SITES", "AttentionSurgeryPlan", "ClassifierHandle", "FeatureLocator",
    "ModelSpec", "PatchActivationGrid", "TokenReadout", "ViTConfig", "ViTHandle",
    "VisionTransformer", "describe_model", "load_model", "require_vit", "wrap_classifier",
    "wrap_vit",
]
