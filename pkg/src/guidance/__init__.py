from .attention import (
    AttentionMapSet,
    SVDComponents,
    record_reference_maps,
    render_components,
    structure_loss,
    svd_components,
)

__all__ = [
    "AttentionMapSet",
    "SVDComponents",
    "record_reference_maps",
    "render_components",
    "structure_loss",
    "svd_components",
]
