"""Local-window nearest-neighbor anomaly detection over pretrained feature embeddings."""

from .embedding import EmbeddingConfig, EmbeddingTensor, avg_pool, build_embedding, resize_map
from .evaluation import EvalReport, UndefinedMetricError, aupro, auroc, connected_components
from .postprocess import (
    ImageScore,
    PixelAnomalyMap,
    gaussian_blur,
    image_score_knn,
    image_score_max,
    upsample_scores,
)
from .search import (
    EmbeddingBank,
    PatchScoreMap,
    SearchConfig,
    build_bank,
    effective_window,
    load_bank,
    save_bank,
    score_patches,
    score_patches_batch,
)
from .storage import (
    DatasetManifest,
    FeatureBundle,
    ManifestEntry,
    read_bundle,
    read_manifest,
    validate_manifest,
    write_bundle,
    write_manifest,
)

__all__ = [
    "EmbeddingBank",
    "EmbeddingConfig",
    "EmbeddingTensor",
    "EvalReport",
    "FeatureBundle",
    "DatasetManifest",
    "ImageScore",
    "ManifestEntry",
    "PatchScoreMap",
    "PixelAnomalyMap",
    "SearchConfig",
    "UndefinedMetricError",
    "aupro",
    "auroc",
    "avg_pool",
    "build_bank",
    "build_embedding",
    "connected_components",
    "effective_window",
    "gaussian_blur",
    "image_score_knn",
    "image_score_max",
    "load_bank",
    "read_bundle",
    "read_manifest",
    "resize_map",
    "save_bank",
    "score_patches",
    "score_patches_batch",
    "upsample_scores",
    "validate_manifest",
    "write_bundle",
    "write_manifest",
]

__version__ = "0.1.0"
