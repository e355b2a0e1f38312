"""Dataset walking and the extraction loop: images in, bundles + masks + manifests out.

Understands the usual industrial-inspection layout::

    <input>/train/good/*.png
    <input>/test/<kind>/*.png
    <input>/ground_truth/<kind>/<stem>_mask.png

Outputs one manifest per split with paths relative to the output directory, so
the result is relocatable as a unit.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

from PIL import Image, UnidentifiedImageError

from .bundle_io import write_bundle, write_manifest
from .extract import ExtractConfig, FeatureNetwork, export_mask, preprocess

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ImageTask:
    path: str
    image_id: str
    label: str
    mask_path: str | None = None


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _list_images(directory: str) -> list[str]:
    names = [
        n for n in sorted(os.listdir(directory))
        if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
    ]
    return [os.path.join(directory, n) for n in names]


def _find_mask(input_dir: str, kind: str, stem: str) -> str | None:
    base = os.path.join(input_dir, "ground_truth", kind)
    for candidate in (f"{stem}_mask.png", f"{stem}.png"):
        path = os.path.join(base, candidate)
        if os.path.isfile(path):
            return path
    return None


def discover_split(input_dir: str, split: str) -> list[ImageTask]:
    """Image tasks for one split of a train/good, test/<kind> layout."""
    split_dir = os.path.join(input_dir, split)
    if not os.path.isdir(split_dir):
        return []
    tasks = []
    for kind in sorted(os.listdir(split_dir)):
        kind_dir = os.path.join(split_dir, kind)
        if not os.path.isdir(kind_dir):
            continue
        label = "normal" if kind == "good" else "anomalous"
        for path in _list_images(kind_dir):
            stem = os.path.splitext(os.path.basename(path))[0]
            mask = None if label == "normal" else _find_mask(input_dir, kind, stem)
            tasks.append(
                ImageTask(
                    path=path,
                    image_id=f"{split}/{kind}/{stem}",
                    label=label,
                    mask_path=mask,
                )
            )
    return tasks


def _write_outputs(
    output_dir: str,
    task: ImageTask,
    maps,
    raw_size: tuple[int, int],
    proc_size: tuple[int, int],
) -> tuple[str, str, str | None]:
    slug = task.image_id.replace("/", "_")
    bundle_name = os.path.join("bundles", f"{slug}.lwnb")
    write_bundle(
        os.path.join(output_dir, bundle_name),
        task.image_id,
        proc_size[0],
        proc_size[1],
        maps,
        task.label,
    )
    mask_name: str | None = None
    if task.mask_path is not None:
        os.makedirs(os.path.join(output_dir, "masks"), exist_ok=True)
        mask_name = os.path.join("masks", f"{slug}.png")
        positives = export_mask(
            task.mask_path,
            os.path.join(output_dir, mask_name),
            raw_size,
            proc_size,
            image_name=task.path,
        )
        if positives == 0:
            _warn(f"mask {task.mask_path} has no positive pixels after thresholding")
        if task.label == "normal":
            _warn(f"normal image {task.image_id} has a mask; normal images need none")
    elif task.label == "anomalous":
        _warn(f"anomalous image {task.image_id} has no ground-truth mask")
    return bundle_name, task.label, mask_name


def run_extraction(input_dir: str, output_dir: str, cfg: ExtractConfig) -> dict[str, str]:
    """Extract every split found under ``input_dir``; returns split -> manifest path."""
    import torch

    cfg.validate()
    network = FeatureNetwork(cfg)
    os.makedirs(os.path.join(output_dir, "bundles"), exist_ok=True)

    manifests: dict[str, str] = {}
    for split in ("train", "test"):
        tasks = discover_split(input_dir, split)
        if not tasks:
            continue
        entries: list[tuple[str, str, str | None]] = []
        # consecutive same-sized images share one forward pass
        pending: list[tuple[ImageTask, torch.Tensor, tuple[int, int]]] = []

        def flush() -> None:
            if not pending:
                return
            batch = torch.cat([tensor for _, tensor, _ in pending], dim=0)
            features = network.forward_features(batch)
            for i, (task, tensor, raw_size) in enumerate(pending):
                maps = [layer[i].cpu().numpy() for layer in features]
                proc_size = (tensor.shape[2], tensor.shape[3])
                entries.append(_write_outputs(output_dir, task, maps, raw_size, proc_size))
            pending.clear()

        for task in tasks:
            try:
                with Image.open(task.path) as img:
                    raw_w, raw_h = img.size
                    tensor = preprocess(img, cfg)
            except (UnidentifiedImageError, OSError) as exc:
                _warn(f"skipping undecodable image {task.path}: {exc}")
                continue
            if pending and (
                pending[0][1].shape != tensor.shape or len(pending) >= cfg.batch_size
            ):
                flush()
            pending.append((task, tensor, (raw_h, raw_w)))
        flush()

        manifest_path = os.path.join(output_dir, f"{split}.tsv")
        write_manifest(manifest_path, entries)
        manifests[split] = manifest_path
    if not manifests:
        raise ValueError(
            f"{input_dir}: no train/ or test/ split directories with images found"
        )
    return manifests
