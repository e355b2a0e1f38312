"""Command-line pipeline: fit a bank, score test images, evaluate, ablate, render heatmaps.

Exit codes are stable: 0 ok, 2 manifest violations, 3 refused overwrite,
4 embedding-config fingerprint mismatch, 5 metric preconditions unmet.
"""

from __future__ import annotations

import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import click
import numpy as np

from . import evaluation, plots, postprocess, search, storage
from .embedding import EmbeddingConfig, EmbeddingTensor, build_embedding
from .postprocess import AGG_KNN_IMAGE, AGG_MAX_PATCH
from .runconfig import RunConfig, load_config
from .search import SearchConfig
from .storage import DatasetManifest, read_bundle, read_manifest, validate_manifest

EXIT_MANIFEST = 2
EXIT_OVERWRITE = 3
EXIT_FINGERPRINT = 4
EXIT_METRIC = 5


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _slug(image_id: str) -> str:
    """File-name-safe form of an image id, used for per-image map files."""
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id)


@dataclass
class _Context:
    cfg: RunConfig
    force: bool = False


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Plain-text key = value configuration file.")
@click.option("--threads", type=int, default=None,
              help="Worker threads (0 = auto; falls back to LWINN_THREADS, then CPU count).")
@click.option("--force", is_flag=True, default=False,
              help="Allow overwriting a bank built with a different embedding config.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, threads: int | None, force: bool) -> None:
    """Local-window nearest-neighbor anomaly detection pipeline."""
    try:
        cfg = load_config(config_path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"bad config: {exc}") from exc
    if threads is not None:
        cfg = replace(cfg, threads=threads)
        cfg.validate()
    ctx.obj = _Context(cfg=cfg, force=force)


def _checked_manifest(path: str, split: str, category: str) -> DatasetManifest:
    try:
        manifest = read_manifest(path, split=split, category=category)
    except storage.StorageError as exc:
        _fail(EXIT_MANIFEST, str(exc))
    if not manifest.entries:
        _fail(EXIT_MANIFEST, f"{path}: manifest has no entries")
    violations = validate_manifest(manifest)
    if violations:
        for v in violations:
            click.echo(f"manifest violation: {v}", err=True)
        _fail(EXIT_MANIFEST, f"{path}: {len(violations)} manifest violation(s)")
    return manifest


def _build_embeddings(
    manifest: DatasetManifest, cfg: RunConfig, limit: int = 0
) -> list[EmbeddingTensor]:
    entries = manifest.entries[:limit] if limit > 0 else manifest.entries

    def embed(entry: storage.ManifestEntry) -> EmbeddingTensor:
        bundle = read_bundle(manifest.resolve(entry.bundle_path))
        bundle.label = entry.label
        bundle.mask_path = entry.mask_path
        return build_embedding(bundle, cfg.embedding)

    workers = cfg.resolve_threads()
    if workers <= 1 or len(entries) <= 1:
        return [embed(e) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(embed, entries))


@main.command()
@click.argument("train_manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--bank", "bank_path", required=True, type=click.Path(dir_okay=False),
              help="Output bank file.")
@click.option("--category", default="default", show_default=True,
              help="Category name recorded in the bank.")
@click.pass_obj
def fit(obj: _Context, train_manifest: str, bank_path: str, category: str) -> None:
    """Build the train embedding bank from a normal-only manifest."""
    started = time.perf_counter()
    cfg = obj.cfg
    manifest = _checked_manifest(train_manifest, "train", category)
    fingerprint = cfg.embedding.fingerprint()
    if os.path.exists(bank_path) and not obj.force:
        try:
            existing = search.read_bank_fingerprint(bank_path)
        except storage.StorageError:
            existing = None
        if existing != fingerprint:
            _fail(
                EXIT_OVERWRITE,
                f"{bank_path} exists with a different embedding config "
                f"(fingerprint {existing}); pass --force to overwrite",
            )
    embeddings = _build_embeddings(manifest, cfg, limit=cfg.max_train_samples)
    bank = search.build_bank(embeddings, category=category, fingerprint=fingerprint)
    search.save_bank(bank, bank_path)
    c, h, w = bank.feature_shape
    elapsed = time.perf_counter() - started
    click.echo(f"n_train = {bank.n_train}")
    click.echo(f"feature_shape = ({c}, {h}, {w})")
    click.echo(f"fit_seconds = {elapsed:.3f}")
    click.echo(f"bank = {bank_path}")


def _score_one(
    emb: EmbeddingTensor, bank: search.EmbeddingBank, cfg: RunConfig
) -> tuple[postprocess.ImageScore, search.PatchScoreMap, postprocess.PixelAnomalyMap]:
    patch_map = search.score_patches(emb, bank, cfg.search)
    pixel_map = postprocess.upsample_scores(patch_map, emb.height, emb.width)
    pixel_map = postprocess.gaussian_blur(pixel_map, cfg.blur_sigma)
    if cfg.aggregation == AGG_KNN_IMAGE:
        score = postprocess.image_score_knn(emb, bank, cfg.knn_k)
    elif cfg.score_after_blur:
        score = postprocess.ImageScore(emb.image_id, float(pixel_map.data.max()), AGG_MAX_PATCH)
    else:
        score = postprocess.image_score_max(patch_map)
    return score, patch_map, pixel_map


@main.command()
@click.argument("test_manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Bank file written by fit.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for maps and the scores index.")
@click.pass_obj
def score(obj: _Context, test_manifest: str, bank_path: str, out_dir: str) -> None:
    """Score every test image against the bank; writes maps and a scores index."""
    cfg = obj.cfg
    bank = search.load_bank(bank_path)
    manifest = _checked_manifest(test_manifest, "test", bank.category)
    fingerprint = cfg.embedding.fingerprint()
    if bank.fingerprint != fingerprint:
        _fail(
            EXIT_FINGERPRINT,
            f"bank {bank_path} was built with embedding config fingerprint "
            f"{bank.fingerprint}, current config is {fingerprint}; "
            "scoring would compare incompatible embeddings",
        )
    os.makedirs(os.path.join(out_dir, "patch_maps"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pixel_maps"), exist_ok=True)

    def process(entry: storage.ManifestEntry) -> tuple[str, float, str]:
        bundle = read_bundle(manifest.resolve(entry.bundle_path))
        emb = build_embedding(bundle, cfg.embedding)
        image_score, patch_map, pixel_map = _score_one(emb, bank, cfg)
        slug = _slug(emb.image_id)
        postprocess.save_map(
            patch_map.data, emb.image_id, os.path.join(out_dir, "patch_maps", slug + ".lwnm")
        )
        postprocess.save_map(
            pixel_map.data, emb.image_id, os.path.join(out_dir, "pixel_maps", slug + ".lwnm")
        )
        return emb.image_id, image_score.score, entry.label

    started = time.perf_counter()
    workers = cfg.resolve_threads()
    if workers <= 1 or len(manifest.entries) <= 1:
        rows = [process(e) for e in manifest.entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(process, manifest.entries))
    elapsed = time.perf_counter() - started

    index_path = os.path.join(out_dir, "scores.tsv")
    lines = [f"{image_id}\t{value:.10g}\t{label}" for image_id, value, label in rows]
    with open(index_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    click.echo(f"scored {len(rows)} images in {elapsed:.3f}s "
               f"({elapsed / len(rows):.4f}s per image)")
    click.echo(f"scores = {index_path}")


def _load_mask(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L")) != 0


def _read_scores_index(path: str) -> list[tuple[str, float, str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            rows.append((cols[0], float(cols[1]), cols[2]))
    return rows


@main.command(name="eval")
@click.option("--scores", "scores_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="scores.tsv written by score.")
@click.option("--test-manifest", "test_manifest", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Test manifest providing ground-truth mask paths.")
@click.option("--maps", "maps_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="pixel_maps directory written by score.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for the report, curve table, and figures.")
@click.option("--category", default="default", show_default=True)
@click.pass_obj
def evaluate(obj: _Context, scores_path: str, test_manifest: str, maps_dir: str,
             out_dir: str, category: str) -> None:
    """Compute image AUROC and pixel AUPRO; writes report, curves, and figures."""
    cfg = obj.cfg
    try:
        rows = _read_scores_index(scores_path)
    except (OSError, ValueError) as exc:
        _fail(EXIT_METRIC, f"cannot read scores index: {exc}")
    if not rows:
        _fail(EXIT_METRIC, f"{scores_path}: no scored images")
    labels = np.array([1 if label == storage.LABEL_ANOMALOUS else 0 for _, _, label in rows])
    values = np.array([value for _, value, _ in rows])
    try:
        auroc_image = evaluation.auroc(values, labels)
        roc_points = evaluation.roc_curve(values, labels)
    except evaluation.UndefinedMetricError as exc:
        _fail(EXIT_METRIC, str(exc))

    manifest = read_manifest(test_manifest, split="test", category=category)
    mask_by_id: dict[str, str | None] = {}
    for entry in manifest.entries:
        try:
            header = storage.read_bundle_header(manifest.resolve(entry.bundle_path))
        except storage.StorageError as exc:
            raise click.ClickException(str(exc)) from exc
        mask_by_id[header.image_id] = (
            manifest.resolve(entry.mask_path) if entry.mask_path else None
        )

    pixel_maps = []
    masks = []
    for image_id, _, label in rows:
        if label != storage.LABEL_ANOMALOUS:
            continue
        mask_path = mask_by_id.get(image_id)
        if mask_path is None:
            _fail(EXIT_METRIC, f"anomalous image {image_id} has no ground-truth mask")
        map_path = os.path.join(maps_dir, _slug(image_id) + ".lwnm")
        if not os.path.isfile(map_path):
            _fail(EXIT_METRIC, f"missing pixel map for {image_id}: {map_path}")
        data, _ = postprocess.load_map(map_path)
        mask = _load_mask(mask_path)
        if mask.shape != data.shape:
            _fail(
                EXIT_METRIC,
                f"{image_id}: mask size {mask.shape} does not match map size {data.shape}",
            )
        if not mask.any():
            _fail(EXIT_METRIC, f"{image_id}: anomalous image has an empty mask")
        pixel_maps.append(data)
        masks.append(mask)
    if not pixel_maps:
        _fail(EXIT_METRIC, "no anomalous images with masks; AUPRO is undefined")
    try:
        aupro_value, pro_points = evaluation.aupro(
            pixel_maps, masks, fpr_cap=cfg.fpr_cap, num_thresholds=cfg.pro_bins
        )
    except evaluation.UndefinedMetricError as exc:
        _fail(EXIT_METRIC, str(exc))

    n_regions = sum(evaluation.connected_components(m)[1] for m in masks)
    report = evaluation.EvalReport(
        auroc_image=auroc_image,
        aupro=aupro_value,
        fpr_cap=cfg.fpr_cap,
        roc_points=roc_points,
        pro_points=pro_points,
        category=category,
        n_images=len(rows),
        n_regions=n_regions,
    )
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.txt")
    curves_path = os.path.join(out_dir, "curves.tsv")
    evaluation.write_report(report, report_path)
    evaluation.write_curves(report, curves_path)
    plots.save_curve_figure(
        roc_points, os.path.join(out_dir, "roc.png"), "image-level ROC", "true positive rate"
    )
    plots.save_curve_figure(
        pro_points, os.path.join(out_dir, "pro.png"), "per-region overlap",
        "mean region overlap", cap=cfg.fpr_cap,
    )
    click.echo(f"auroc_image = {auroc_image:.4f}")
    click.echo(f"aupro = {aupro_value:.4f}")
    click.echo(f"report = {report_path}")


@main.command()
@click.argument("train_manifest", type=click.Path(exists=True, dir_okay=False))
@click.argument("test_manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for the ablation table and figures.")
@click.option("--deltas", default="1,3,5,7", show_default=True,
              help="Comma-separated odd window sizes to sweep.")
@click.option("--sweep-pooling", is_flag=True, default=False,
              help="Run both pooling on and off.")
@click.option("--sweep-interpolation", is_flag=True, default=False,
              help="Run both bilinear and nearest interpolation.")
@click.option("--normalization-tag", default="unspecified", show_default=True,
              help="Extractor-side normalization setting, recorded as row metadata.")
@click.option("--category", default="default", show_default=True)
@click.pass_obj
def ablate(obj: _Context, train_manifest: str, test_manifest: str, out_dir: str, deltas: str,
           sweep_pooling: bool, sweep_interpolation: bool, normalization_tag: str,
           category: str) -> None:
    """Sweep window sizes and embedding toggles; one eval row per configuration."""
    cfg = obj.cfg
    try:
        delta_values = [int(v) for v in deltas.split(",") if v.strip()]
    except ValueError as exc:
        raise click.ClickException(f"bad --deltas: {exc}") from exc
    if not delta_values or any(d < 1 or d % 2 == 0 for d in delta_values):
        raise click.ClickException(f"--deltas must list odd positive integers, got {deltas!r}")

    train = _checked_manifest(train_manifest, "train", category)
    test = _checked_manifest(test_manifest, "test", category)
    labels = np.array(
        [1 if e.label == storage.LABEL_ANOMALOUS else 0 for e in test.entries]
    )
    if labels.min() == labels.max():
        _fail(EXIT_METRIC, "ablation needs both normal and anomalous test images")

    masks = {}
    for entry in test.entries:
        if entry.label == storage.LABEL_ANOMALOUS and entry.mask_path:
            masks[entry.bundle_path] = _load_mask(test.resolve(entry.mask_path))
    have_all_masks = all(
        e.bundle_path in masks for e in test.entries if e.label == storage.LABEL_ANOMALOUS
    )

    pooling_choices = [True, False] if sweep_pooling else [cfg.embedding.pooling]
    interp_choices = (
        ["bilinear", "nearest"] if sweep_interpolation else [cfg.embedding.interpolation]
    )

    rows = []
    for pooling in pooling_choices:
        for interp in interp_choices:
            emb_cfg = replace(cfg.embedding, pooling=pooling, interpolation=interp)
            variant = replace(cfg, embedding=emb_cfg)
            fit_start = time.perf_counter()
            train_embs = _build_embeddings(train, variant, limit=cfg.max_train_samples)
            bank = search.build_bank(
                train_embs, category=category, fingerprint=emb_cfg.fingerprint()
            )
            fit_seconds = time.perf_counter() - fit_start

            embed_start = time.perf_counter()
            test_embs = _build_embeddings(test, variant)
            embed_per_image = (time.perf_counter() - embed_start) / len(test.entries)

            for delta in delta_values:
                run = replace(variant, search=replace(cfg.search, window_size=delta,
                                                      mode=search.MODE_LOCAL))
                score_start = time.perf_counter()
                scored = [_score_one(emb, bank, run) for emb in test_embs]
                score_per_image = (time.perf_counter() - score_start) / len(test_embs)
                values = np.array([s.score for s, _, _ in scored])
                auroc_image = evaluation.auroc(values, labels)
                aupro_value = None
                if have_all_masks and masks:
                    pix = [
                        p.data
                        for (_, _, p), e in zip(scored, test.entries)
                        if e.label == storage.LABEL_ANOMALOUS
                    ]
                    msk = [
                        masks[e.bundle_path]
                        for e in test.entries
                        if e.label == storage.LABEL_ANOMALOUS
                    ]
                    aupro_value, _ = evaluation.aupro(
                        pix, msk, fpr_cap=cfg.fpr_cap, num_thresholds=cfg.pro_bins
                    )
                row = {
                    "delta": delta,
                    "pooling": pooling,
                    "interpolation": interp,
                    "normalization": normalization_tag,
                    "auroc_image": auroc_image,
                    "aupro": aupro_value,
                    "fit_seconds": fit_seconds,
                    "test_seconds_per_image": embed_per_image + score_per_image,
                }
                rows.append(row)
                aupro_text = f"{aupro_value:.4f}" if aupro_value is not None else "-"
                click.echo(
                    f"delta={delta} pooling={pooling} interpolation={interp} "
                    f"auroc={auroc_image:.4f} aupro={aupro_text} "
                    f"test_s_per_image={row['test_seconds_per_image']:.4f}"
                )

    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "ablation.tsv")
    header = ("delta\tpooling\tinterpolation\tnormalization\tauroc_image\taupro\t"
              "fit_seconds\ttest_seconds_per_image")
    lines = [header]
    for row in rows:
        aupro_text = f"{row['aupro']:.10g}" if row["aupro"] is not None else ""
        lines.append(
            f"{row['delta']}\t{int(row['pooling'])}\t{row['interpolation']}\t"
            f"{row['normalization']}\t{row['auroc_image']:.10g}\t{aupro_text}\t"
            f"{row['fit_seconds']:.6f}\t{row['test_seconds_per_image']:.6f}"
        )
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    figures = plots.save_ablation_figures(rows, os.path.join(out_dir, "ablation"))
    click.echo(f"table = {table_path}")
    for fig in figures:
        click.echo(f"figure = {fig}")


@main.command()
@click.argument("map_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Output PNG path.")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Original image to alpha-blend under the heatmap.")
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--colormap", default="jet", show_default=True)
def heatmap(map_path: str, out_path: str, image_path: str | None,
            alpha: float, colormap: str) -> None:
    """Render a score map as a min-max normalized colormapped PNG."""
    data, _ = postprocess.load_map(map_path)
    original = None
    if image_path is not None:
        from PIL import Image

        with Image.open(image_path) as img:
            original = np.asarray(img.convert("RGB"))
        if original.shape[:2] != data.shape:
            raise click.ClickException(
                f"original image size {original.shape[:2]} does not match map {data.shape}"
            )
    postprocess.render_heatmap(data, out_path, original=original, alpha=alpha, colormap=colormap)
    click.echo(f"heatmap = {out_path}")


if __name__ == "__main__":
    main()
