"""Run images through a pretrained residual network and export per-layer feature maps.

Preprocessing: bilinear resize (shortest side to a target, aspect preserved by
default), optional per-channel scale-shift normalization. No cropping, no
augmentation; inference mode only, so repeated runs are byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image
from torchvision.models import resnet18

# channel statistics published with the ImageNet-pretrained torchvision weights
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightsError(RuntimeError):
    """Requested model weights cannot be loaded."""


@dataclass
class ExtractConfig:
    shortest_side: int = 256
    preserve_aspect: bool = True
    normalize: bool = True
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    layers: tuple[int, ...] = (1, 2, 3)  # residual stages to export
    device: str = "cpu"
    weights: str = "imagenet"  # imagenet | random | path to a .pth state dict
    seed: int = 0  # weight init seed when weights = random
    batch_size: int = 8

    def validate(self) -> None:
        if self.shortest_side < 32:
            raise ValueError(f"shortest_side must be >= 32, got {self.shortest_side}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must each have 3 values")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std values must be positive, got {self.std}")
        if not self.layers or any(s not in (1, 2, 3, 4) for s in self.layers):
            raise ValueError(f"layers must name residual stages 1-4, got {self.layers}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "on", "yes", "1"):
        return True
    if lowered in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"config key {key!r}: expected a boolean, got {value!r}")


def load_extract_config(path: str | None) -> ExtractConfig:
    """Read ``key = value`` lines ('#' comments) into an ExtractConfig."""
    cfg = ExtractConfig()
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip().lower()
            value = value.strip()
            if key == "shortest_side":
                cfg = replace(cfg, shortest_side=int(value))
            elif key == "preserve_aspect":
                cfg = replace(cfg, preserve_aspect=_parse_bool(value, key))
            elif key == "normalize":
                cfg = replace(cfg, normalize=_parse_bool(value, key))
            elif key == "mean":
                cfg = replace(cfg, mean=tuple(float(v) for v in value.split(",")))
            elif key == "std":
                cfg = replace(cfg, std=tuple(float(v) for v in value.split(",")))
            elif key == "layers":
                cfg = replace(cfg, layers=tuple(int(v) for v in value.split(",")))
            elif key == "device":
                cfg = replace(cfg, device=value)
            elif key == "weights":
                cfg = replace(cfg, weights=value)
            elif key == "seed":
                cfg = replace(cfg, seed=int(value))
            elif key == "batch_size":
                cfg = replace(cfg, batch_size=int(value))
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    cfg.validate()
    return cfg


class FeatureNetwork:
    """ResNet18 trunk that exposes the outputs of the first residual stages."""

    def __init__(self, cfg: ExtractConfig):
        cfg.validate()
        if cfg.weights == "imagenet":
            try:
                from torchvision.models import ResNet18_Weights

                model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise WeightsError(
                    f"cannot load ImageNet weights ({exc}); pass weights=random or a local path"
                ) from exc
        elif cfg.weights == "random":
            torch.manual_seed(cfg.seed)
            model = resnet18(weights=None)
        else:
            if not os.path.isfile(cfg.weights):
                raise WeightsError(f"weights file not found: {cfg.weights}")
            model = resnet18(weights=None)
            state = torch.load(cfg.weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        model.eval()
        self.device = torch.device(cfg.device)
        self.model = model.to(self.device)
        self.cfg = cfg
        self.stages = cfg.layers

    @torch.no_grad()
    def forward_features(self, batch: torch.Tensor) -> list[torch.Tensor]:
        m = self.model
        x = batch.to(self.device)
        x = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        outputs = []
        for stage_index, stage in enumerate((m.layer1, m.layer2, m.layer3, m.layer4), start=1):
            x = stage(x)
            if stage_index in self.stages:
                outputs.append(x)
            if stage_index >= max(self.stages):
                break
        return outputs


def preprocess(image: Image.Image, cfg: ExtractConfig) -> torch.Tensor:
    """Decode to RGB, resize bilinearly, scale to [0, 1], optionally normalize."""
    rgb = image.convert("RGB")
    w, h = rgb.size
    if cfg.preserve_aspect:
        scale = cfg.shortest_side / min(w, h)
        new_w, new_h = round(w * scale), round(h * scale)
    else:
        new_w = new_h = cfg.shortest_side
    if (new_w, new_h) != (w, h):
        rgb = rgb.resize((new_w, new_h), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    if cfg.normalize:
        mean = torch.tensor(cfg.mean, dtype=torch.float32).view(3, 1, 1)
        std = torch.tensor(cfg.std, dtype=torch.float32).view(3, 1, 1)
        tensor = (tensor - mean) / std
    return tensor.unsqueeze(0)


def extract_features(
    network: FeatureNetwork, image: Image.Image, cfg: ExtractConfig
) -> tuple[list[np.ndarray], int, int]:
    """Feature maps for one image plus the preprocessed image size (H, W)."""
    batch = preprocess(image, cfg)
    maps = [t[0].cpu().numpy().astype(np.float32) for t in network.forward_features(batch)]
    return maps, batch.shape[2], batch.shape[3]


def export_mask(
    src_path: str,
    dst_path: str,
    raw_size: tuple[int, int],
    processed_size: tuple[int, int],
    image_name: str = "",
) -> int:
    """Threshold a ground-truth mask at 128 and write it as 8-bit grayscale PNG.

    The raw mask must match the raw image size (``raw_size``, H x W); it is
    then nearest-resized to the preprocessed image size so engine-side
    evaluation sees aligned shapes. Returns the number of positive pixels.
    """
    with Image.open(src_path) as img:
        gray = img.convert("L")
        if gray.size != (raw_size[1], raw_size[0]):
            raise ValueError(
                f"mask {src_path} is {gray.size[1]}x{gray.size[0]} but image "
                f"{image_name or '?'} is {raw_size[0]}x{raw_size[1]}"
            )
        target = (processed_size[1], processed_size[0])
        if gray.size != target:
            gray = gray.resize(target, Image.NEAREST)
        arr = np.asarray(gray)
    binary = np.where(arr >= 128, 255, 0).astype(np.uint8)
    Image.fromarray(binary, mode="L").save(dst_path, format="PNG")
    return int((binary > 0).sum())
