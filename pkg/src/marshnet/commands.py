"""Subcommand implementations behind the command-line front end.

Every command reads its inputs, computes in memory, and only then writes
outputs through temp-file renames, so a failure leaves no partial files.
Paths inside manifests are stored relative to the manifest's directory.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from pathlib import Path
from typing import Callable

import numpy as np

from . import aggregate, io, labels
from .config import PipelineConfig
from .filtering import Autoencoder, filter_patches, train_autoencoder
from .gradcam import class_activation, gradcam, overlay
from .model import Classifier, build_classifier, predict_proba, train
from .stain import StainError, StainProfile, fit_stain, normalize_patch
from .synth import CORPUS_HEADER, generate_corpus
from .tiling import MANIFEST_HEADER, SlideImage, TileGrid, iter_patches, patch_filename, resize_bilinear

PROBS_HEADER = ("slide_id", "patch_id") + tuple(f"p_{c}" for c in labels.CLASSES)
HISTORY_HEADER = ("epoch", "mean_loss", "train_acc")

Log = Callable[..., None]


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


class Manifest:
    """Rows of a patch manifest plus the directory their paths are relative to."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"file not found: {self.path}")
        self.base = self.path.parent
        self.rows = io.read_csv(self.path)
        if self.rows:
            missing = {"slide_id", "patch_id", "path"} - set(self.rows[0])
            if missing:
                raise ValueError(f"{self.path}: manifest lacks column(s) {', '.join(sorted(missing))}")
        self.header = tuple(self.rows[0]) if self.rows else MANIFEST_HEADER

    def kept(self) -> list[dict[str, str]]:
        return [r for r in self.rows if r.get("kept", "1") == "1"]

    def resolve(self, row: dict[str, str]) -> Path:
        p = Path(row["path"])
        return p if p.is_absolute() else self.base / p

    def load(self, row: dict[str, str], size: int | None = None) -> np.ndarray:
        img = io.read_rgb(self.resolve(row))
        return resize_bilinear(img, size) if size is not None else img

    def rebased(self, row: dict[str, str], new_base: Path) -> dict[str, str]:
        out = dict(row)
        out["path"] = _rel(self.resolve(row), new_base)
        return out


def _labelled(rows: list[dict[str, str]]) -> list[int]:
    out = []
    for r in rows:
        if not r.get("label"):
            raise ValueError(f"patch {r['slide_id']}/{r['patch_id']} has no label")
        out.append(labels.index(r["label"]))
    return out


# ---------------------------------------------------------------- synth / patch

def cmd_synth(cfg: PipelineConfig, per_class: int, size: int, height: int | None, out: Path, log: Log) -> None:
    log("synth.start", per_class=per_class, width=size, height=height or size, seed=cfg.seed)
    with io.staged_dir(out) as tmp:
        corpus = generate_corpus(per_class, size, height, seed=cfg.seed, out_dir=tmp, keep_pixels=False)
        # rewrite manifest paths relative to the final directory
        rows = [(r[0], r[1], Path(r[2]).name) + tuple(r[3:]) for r in corpus.rows]
        io.write_csv(tmp / "corpus.csv", CORPUS_HEADER, rows)
    log("synth.done", slides=len(corpus.rows), out=str(out))


def cmd_patch(cfg: PipelineConfig, inputs: list[Path], corpus: Path | None, label: str | None,
              out: Path, log: Log) -> None:
    grid = TileGrid(cfg.patch_size, cfg.overlap)
    sources: list[tuple[Path, str, str | None]] = []
    if corpus is not None:
        if not corpus.exists():
            raise FileNotFoundError(f"file not found: {corpus}")
        for r in io.read_csv(corpus):
            p = Path(r["path"])
            sources.append((p if p.is_absolute() else corpus.parent / p, r["slide_id"], r.get("label") or None))
    for p in inputs:
        sources.append((p, p.stem, label))
    if not sources:
        raise ValueError("no input slides given")
    for path, _, _ in sources:
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
    rows = []
    with io.staged_dir(out) as tmp:
        for path, sid, lab in sources:
            slide = SlideImage.open(path, sid, lab)
            n = 0
            for rec, pixels in iter_patches(slide, grid):
                name = patch_filename(rec.slide_id, rec.row, rec.col)
                io.write_png(tmp / name, pixels)
                rows.append((rec.slide_id, rec.patch_id, rec.x, rec.y, rec.size, rec.label or "", name))
                n += 1
            log("patch.slide", slide_id=sid, width=slide.width, height=slide.height, patches=n)
        io.write_csv(tmp / "manifest.csv", MANIFEST_HEADER, rows)
    log("patch.done", patches=len(rows), stride=grid.stride, out=str(out))


# ---------------------------------------------------------------- filter

def cmd_ae_train(cfg: PipelineConfig, manifest: Path, out: Path, log: Log) -> None:
    from .filtering.autoencoder import INPUT_SIZE
    m = Manifest(manifest)
    patches = np.stack([m.load(r, INPUT_SIZE) for r in m.rows]) if m.rows else np.zeros((0, INPUT_SIZE, INPUT_SIZE, 3))
    log("ae-train.start", patches=len(patches), epochs=cfg.ae_epochs, seed=cfg.seed, embed_dim=cfg.embed_dim)
    result = train_autoencoder(patches, epochs=cfg.ae_epochs, seed=cfg.seed, lr=cfg.ae_lr, embed_dim=cfg.embed_dim)
    for epoch, loss in enumerate(result.history, 1):
        log("ae-train.epoch", epoch=epoch, mse=loss)
    result.model.save(out)
    log("ae-train.done", out=str(out))


def cmd_filter(cfg: PipelineConfig, manifest: Path, model_path: Path, out: Path, log: Log) -> None:
    m = Manifest(manifest)
    if not model_path.exists():
        raise FileNotFoundError(f"file not found: {model_path}")
    model = Autoencoder.load(model_path)
    if len(m.rows) < 2:
        raise ValueError("filtering needs at least two patches")
    from .filtering.autoencoder import INPUT_SIZE
    small = [m.load(r, INPUT_SIZE) for r in m.rows]
    mask, result = filter_patches(model, small, seed=cfg.seed, beta=cfg.stain_beta)
    header = tuple(h for h in m.header if h != "kept") + ("kept",)
    rows = []
    for r, keep in zip(m.rows, mask):
        r = m.rebased(r, out.parent)
        r["kept"] = "1" if keep else "0"
        rows.append(tuple(r.get(h, "") for h in header))
    io.write_csv(out, header, rows)
    log("filter.done", patches=len(rows), kept=int(mask.sum()), inertia=result.inertia, seed=cfg.seed)


# ---------------------------------------------------------------- stain

def cmd_stain_fit(cfg: PipelineConfig, ref: Path, out: Path, log: Log) -> None:
    img = io.read_rgb(ref)
    fit = fit_stain(img, lam=cfg.stain_lambda, iters=cfg.stain_iters, seed=cfg.seed, beta=cfg.stain_beta)
    if not fit.converged:
        log("stain-fit.warning", message="did not converge; best iterate returned", iters=cfg.stain_iters)
    fit.profile.save(out)
    log("stain-fit.done", objective=fit.objective[-1], iterations=len(fit.objective) - 1,
        converged=fit.converged, pixels=fit.n_pixels, out=str(out))


def _source_profile(cfg: PipelineConfig, image: np.ndarray, what: str, log: Log) -> StainProfile | None:
    try:
        return fit_stain(image, lam=cfg.stain_lambda, iters=cfg.stain_iters, seed=cfg.seed,
                         beta=cfg.stain_beta).profile
    except StainError as exc:
        log("stain-normalize.skip", source=what, reason=str(exc))
        return None


def _normalized(img: np.ndarray, source: StainProfile | None, target: StainProfile, beta: float) -> np.ndarray:
    return img if source is None else normalize_patch(img, source, target, beta=beta)


def cmd_stain_normalize(cfg: PipelineConfig, profile: Path, in_dir: Path | None, manifest: Path | None,
                        out: Path, log: Log) -> None:
    """Normalize a directory of PNGs, or the kept patches of a manifest.

    Directory mode fits a source profile per image; manifest mode fits one
    per slide from that slide's kept patches.  Images without enough tissue
    for a fit are copied unchanged.
    """
    target = StainProfile.load(profile)
    n = 0
    with io.staged_dir(out) as tmp:
        if manifest is not None:
            m = Manifest(manifest)
            by_slide: OrderedDict[str, list[dict[str, str]]] = OrderedDict()
            for r in m.kept():
                by_slide.setdefault(r["slide_id"], []).append(r)
            rows = []
            for sid, group in by_slide.items():
                imgs = [m.load(r) for r in group]
                source = _source_profile(cfg, np.concatenate([i.reshape(-1, 3) for i in imgs])[None], sid, log)
                for r, img in zip(group, imgs):
                    name = Path(r["path"]).name
                    io.write_png(tmp / name, _normalized(img, source, target, cfg.stain_beta))
                    rows.append(tuple(name if h == "path" else r.get(h, "") for h in m.header))
                    n += 1
            io.write_csv(tmp / "manifest.csv", m.header, rows)
        else:
            if in_dir is None or not in_dir.is_dir():
                raise FileNotFoundError(f"file not found: {in_dir}")
            for path in sorted(in_dir.glob("*.png")):
                img = io.read_rgb(path)
                source = _source_profile(cfg, img, path.name, log)
                io.write_png(tmp / path.name, _normalized(img, source, target, cfg.stain_beta))
                n += 1
    log("stain-normalize.done", images=n, out=str(out), seed=cfg.seed)


# ---------------------------------------------------------------- classifier

def cmd_train(cfg: PipelineConfig, manifest: Path, out: Path, history: Path | None, log: Log) -> None:
    m = Manifest(manifest)
    rows = m.kept()
    if not rows:
        raise ValueError("no kept patches to train on")
    images = np.stack([m.load(r, cfg.input_size) for r in rows])
    targets = _labelled(rows)
    model = build_classifier(cfg.model_config(), seed=cfg.seed)
    log("train.start", patches=len(rows), params=model.param_count(), epochs=cfg.epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    result = train(model, images, targets, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed, lr=cfg.lr,
                   log=lambda s: log("train.epoch", epoch=s.epoch, mean_loss=s.mean_loss, train_acc=s.train_acc))
    hist_rows = [(s.epoch, repr(s.mean_loss), repr(s.train_acc)) for s in result.history]
    model.save(out, extra={"seed": cfg.seed, "epochs": cfg.epochs, "lr": cfg.lr})
    io.write_csv(history or out.with_name("history.csv"), HISTORY_HEADER, hist_rows)
    log("train.done", out=str(out), final_loss=result.history[-1].mean_loss)


def cmd_predict(cfg: PipelineConfig, model_path: Path, manifest: Path, out: Path, log: Log) -> None:
    if not model_path.exists():
        raise FileNotFoundError(f"file not found: {model_path}")
    model = Classifier.load(model_path)
    m = Manifest(manifest)
    rows = m.kept()
    size = model.config.input_size
    out_rows = []
    for start in range(0, len(rows), 64):
        chunk = rows[start:start + 64]
        probs = predict_proba(model, np.stack([m.load(r, size) for r in chunk]))
        for r, p in zip(chunk, probs):
            out_rows.append((r["slide_id"], r["patch_id"], *(repr(float(v)) for v in p)))
    io.write_csv(out, PROBS_HEADER, out_rows)
    log("predict.done", patches=len(out_rows), out=str(out))


def read_probs(path: Path) -> tuple[list[str], list[str], np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    rows = io.read_csv(path)
    if rows and not set(PROBS_HEADER) <= set(rows[0]):
        raise ValueError(f"{path}: expected columns {','.join(PROBS_HEADER)}")
    probs = np.array([[float(r[h]) for h in PROBS_HEADER[2:]] for r in rows]).reshape(-1, labels.N_CLASSES)
    if not np.all(np.isfinite(probs)) or (probs < 0).any():
        raise ValueError(f"{path}: probabilities must be finite and non-negative")
    return [r["slide_id"] for r in rows], [r["patch_id"] for r in rows], probs


def _truths(label_file: Path | None) -> tuple[dict[str, int], dict[tuple[str, str], int]]:
    """Slide and (slide, patch) labels from a manifest or corpus CSV."""
    if label_file is None:
        return {}, {}
    if not label_file.exists():
        raise FileNotFoundError(f"file not found: {label_file}")
    slides, patches = {}, {}
    for r in io.read_csv(label_file):
        if not r.get("label"):
            continue
        c = labels.index(r["label"])
        slides[r["slide_id"]] = c
        if "patch_id" in r:
            patches[(r["slide_id"], r["patch_id"])] = c
    return slides, patches


def cmd_infer_slide(cfg: PipelineConfig, probs_path: Path, label_file: Path | None, out: Path, log: Log) -> None:
    sids, _, probs = read_probs(probs_path)
    slide_truth, _ = _truths(label_file)
    if not sids:
        raise ValueError("no tissue patches survived filtering")
    inferences = aggregate.infer_slides(sids, probs, slide_truth)
    io.atomic_write_text(out, aggregate.slides_json(inferences))
    for s in inferences:
        log("infer-slide.slide", slide_id=s.slide_id, n_patches=s.n_patches, predicted=labels.name(s.predicted))
    log("infer-slide.done", slides=len(inferences), out=str(out))


def cmd_evaluate(cfg: PipelineConfig, probs_path: Path, label_file: Path, out: Path, plot: bool,
                 precision_ci: str, log: Log) -> None:
    sids, pids, probs = read_probs(probs_path)
    slide_truth, patch_truth = _truths(label_file)
    missing = [(s, p) for s, p in zip(sids, pids) if (s, p) not in patch_truth]
    if missing:
        raise ValueError(f"{len(missing)} predicted patch(es) have no label, e.g. {missing[0][0]}/{missing[0][1]}")
    truths = [patch_truth[(s, p)] for s, p in zip(sids, pids)]
    preds = [aggregate.patch_map(p) for p in probs]
    report = aggregate.compute_metrics(preds, truths, precision_ci_n=precision_ci)
    curves = aggregate.roc_auc(probs, truths)
    inferences = aggregate.infer_slides(sids, probs, slide_truth)
    slide_report = aggregate.slide_metrics(inferences)
    with io.staged_dir(out) as tmp:
        (tmp / "metrics.json").write_text(aggregate.metrics_json(report, curves, slide_report))
        (tmp / "slides.json").write_text(aggregate.slides_json(inferences))
        for name, curve in curves.items():
            if curve is not None:
                (tmp / f"roc_{name}.csv").write_text(aggregate.roc_csv(curve))
        if plot:
            aggregate.plot_roc(curves, tmp / "roc.png")
    log("evaluate.done", patch_accuracy=report.overall_accuracy, slide_accuracy=slide_report.overall_accuracy,
        auc={k: (None if c is None else c.auc) for k, c in curves.items()}, out=str(out))


# ---------------------------------------------------------------- grad-cam

def cmd_gradcam(cfg: PipelineConfig, model_path: Path, patch: Path, target: str, out: Path, alpha: float,
                log: Log) -> None:
    if not model_path.exists():
        raise FileNotFoundError(f"file not found: {model_path}")
    model = Classifier.load(model_path)
    img = io.read_rgb(patch)
    heat = gradcam(model, img, target, patch.stem)
    raw = class_activation(model, img, labels.index(target))
    io.atomic_write_bytes(out, io.encode_png(overlay(img, heat, alpha)))
    io.atomic_write_text(out.with_suffix(".csv"), io.csv_text(
        [f"c{j}" for j in range(raw.shape[1])], ([repr(float(v)) for v in row] for row in raw)))
    log("gradcam.done", target=target, max_raw=float(raw.max()), out=str(out))
