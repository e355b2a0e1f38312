"""Pipeline run configuration and the plain-text ``key = value`` config file."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .embedding import EmbeddingConfig
from .postprocess import AGGREGATIONS, AGG_MAX_PATCH
from .search import SearchConfig

THREADS_ENV_VAR = "LWINN_THREADS"


@dataclass
class RunConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    aggregation: str = AGG_MAX_PATCH
    blur_sigma: float = 4.0
    knn_k: int = 5
    threads: int = 0  # 0 = auto
    max_train_samples: int = 0  # 0 = unlimited
    fpr_cap: float = 0.3
    pro_bins: int = 0  # 0 = exact threshold sweep
    score_after_blur: bool = False

    def validate(self) -> None:
        self.embedding.validate()
        self.search.validate()
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be >= 1, got {self.knn_k}")
        if self.threads < 0:
            raise ValueError(f"threads must be >= 0, got {self.threads}")
        if not 0 < self.fpr_cap <= 1.0:
            raise ValueError(f"fpr_cap must be in (0, 1], got {self.fpr_cap}")

    def resolve_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        env = os.environ.get(THREADS_ENV_VAR, "").strip()
        if env:
            value = int(env)
            if value > 0:
                return value
        return os.cpu_count() or 1


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "on", "yes", "1"):
        return True
    if lowered in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"config key {key!r}: expected a boolean, got {value!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines ('#' comments) into a RunConfig."""
    cfg = base if base is not None else RunConfig()
    emb = cfg.embedding
    search = cfg.search
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        try:
            if key == "pooling":
                emb = replace(emb, pooling=_parse_bool(value, key))
            elif key == "pool_kernel":
                emb = replace(emb, pool_kernel=int(value))
            elif key == "pool_stride":
                emb = replace(emb, pool_stride=int(value))
            elif key == "interpolation":
                emb = replace(emb, interpolation=value)
            elif key == "layers":
                indices = tuple(int(v) for v in value.split(",") if v.strip())
                emb = replace(emb, layer_indices=indices)
            elif key == "window_size":
                search = replace(search, window_size=int(value))
            elif key == "mode":
                search = replace(search, mode=value)
            elif key == "memory_budget":
                search = replace(search, memory_budget=int(value))
            elif key == "aggregation":
                cfg = replace(cfg, aggregation=value)
            elif key == "blur_sigma":
                cfg = replace(cfg, blur_sigma=float(value))
            elif key == "knn_k":
                cfg = replace(cfg, knn_k=int(value))
            elif key == "threads":
                cfg = replace(cfg, threads=int(value))
            elif key == "max_train_samples":
                cfg = replace(cfg, max_train_samples=int(value))
            elif key == "fpr_cap":
                cfg = replace(cfg, fpr_cap=float(value))
            elif key == "pro_bins":
                cfg = replace(cfg, pro_bins=int(value))
            elif key == "score_after_blur":
                cfg = replace(cfg, score_after_blur=_parse_bool(value, key))
            else:
                raise ValueError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    cfg = replace(cfg, embedding=emb, search=search)
    cfg.validate()
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
