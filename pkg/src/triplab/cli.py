"""``triplab`` command line: generate, stats, train, evaluate, ablate.

Exit codes: 0 success, 2 configuration or input error, 3 training
divergence, 4 artifact mismatch (vocabulary mismatch or an existing output
that differs and ``--force`` was not given).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from triplab import __version__
from triplab.config import ConfigError, ExperimentConfig, format_config, load_config
from triplab.metrics import dataset_localization_score, decode_triplets, evaluate
from triplab.model import cam_to_boxes, load_checkpoint, predict, read_checkpoint_meta, save_checkpoint
from triplab.overlay import render_overlay
from triplab.synthgen import RenderConfig, generate_dataset, load_boxes, load_images
from triplab.training import DivergenceError, train
from triplab.vocab import (
    AXES,
    AnnotationError,
    Dataset,
    Vocabulary,
    build_validity_mask,
    canonical_class_list,
    canonical_triplet_weights,
    cooccurrence_table,
    frequency_table,
    load_annotations,
    load_class_list,
    load_vocabulary,
    save_annotations,
    save_class_list,
    split_dataset,
)

log = logging.getLogger("triplab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4
UNHASHED = {"timings.json"}

ABLATION_VARIANTS = (
    # name, kind, FC, 3D(untrained), 3D(trained), CAG, model overrides
    ("FC", "mtl", True, False, False, False, {}),
    ("3D-untrained", "tripnet", False, True, False, False, {"space": "untrained", "cag": False}),
    ("3D-untrained+CAG", "tripnet", False, True, False, True, {"space": "untrained", "cag": True}),
    ("3D-trained", "tripnet", False, False, True, False, {"space": "trained", "cag": False}),
    ("3D-trained+CAG", "tripnet", False, False, True, True, {"space": "trained", "cag": True}),
)


class ArtifactMismatch(RuntimeError):
    pass


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): file_hash(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in UNHASHED}


def staging_dir(final: Path) -> Path:
    tmp = final.parent / f".{final.name}.staging-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def commit(staging: Path, final: Path, force: bool) -> str:
    """Move ``staging`` to ``final`` unless an identical copy is already there."""
    if final.exists():
        if tree_hashes(final) == tree_hashes(staging):
            shutil.rmtree(staging)
            return "unchanged"
        if not force:
            shutil.rmtree(staging)
            raise ArtifactMismatch(f"{final} exists with different content; use --force to overwrite")
        shutil.rmtree(final)
    shutil.move(str(staging), str(final))
    return "written"


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, **extra) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        **extra,
        "files": tree_hashes(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def resolve_vocab(cfg: ExperimentConfig) -> Vocabulary:
    if cfg.vocab == "canonical":
        return Vocabulary.canonical()
    path = Path(cfg.vocab)
    if not path.is_file():
        raise ConfigError(f"vocabulary file not found: {path}")
    try:
        return load_vocabulary(path)
    except AnnotationError as exc:
        raise ConfigError(f"bad vocabulary {path}: {exc}") from None


def resolve_classes(cfg: ExperimentConfig, vocab: Vocabulary):
    if cfg.classes:
        try:
            return load_class_list(cfg.classes, vocab)
        except (OSError, AnnotationError) as exc:
            raise ConfigError(f"bad class list {cfg.classes}: {exc}") from None
    if vocab == Vocabulary.canonical():
        return canonical_class_list(cfg.n_classes)
    raise ConfigError("a class list is required for a non-canonical vocabulary")


def render_config(cfg: ExperimentConfig, vocab: Vocabulary) -> RenderConfig:
    weights = None
    if cfg.distribution == "cooccurrence":
        if vocab != Vocabulary.canonical():
            raise ConfigError("co-occurrence sampling is only defined for the canonical vocabulary")
        weights = canonical_triplet_weights(vocab) ** cfg.distribution_power
    try:
        return RenderConfig(vocab, height=cfg.height, width=cfg.width, distribution=cfg.distribution,
                            weights=weights, count_probs=cfg.count_probs,
                            unique_instruments=cfg.unique_instruments, n_distractors=cfg.n_distractors,
                            noise=cfg.noise)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


class Store:
    """A generated dataset directory."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if not (self.path / "vocab.txt").is_file():
            raise ConfigError(f"no dataset at {self.path}")
        try:
            self.vocab = load_vocabulary(self.path / "vocab.txt")
        except AnnotationError as exc:
            raise ConfigError(f"bad vocabulary in {self.path}: {exc}") from None

    def split(self, name: str) -> Dataset:
        try:
            ds = load_annotations(self.path / f"{name}.csv", self.vocab, name)
        except AnnotationError as exc:
            raise ConfigError(f"{self.path / (name + '.csv')}: {exc}") from None
        except OSError:
            raise ConfigError(f"missing split file {name}.csv in {self.path}") from None
        return Dataset(ds.annotations, ds.vocab, name, str(self.path))

    def images(self, ds: Dataset) -> np.ndarray:
        return load_images(ds, self.path)

    def hashes(self) -> dict[str, str]:
        return {name: file_hash(self.path / f"{name}.csv") for name in ("train", "val", "test")
                if (self.path / f"{name}.csv").is_file()}


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> int:
    vocab = resolve_vocab(cfg)
    classes = resolve_classes(cfg, vocab)
    mask = build_validity_mask(classes, vocab)
    rcfg = render_config(cfg, vocab)
    final = cfg.dataset_dir
    final.parent.mkdir(parents=True, exist_ok=True)
    out = staging_dir(final)
    data = generate_dataset(rcfg, mask, cfg.n_frames, cfg.seed, cfg.frames_per_video, out_dir=out)
    save_class_list(classes, vocab, out / "classes.csv")
    try:
        splits = split_dataset(data.dataset, tuple(cfg.split_fractions), cfg.split_seed)
    except ValueError as exc:
        shutil.rmtree(out)
        raise ConfigError(str(exc)) from None
    for ds in splits:
        save_annotations(ds, out / f"{ds.split}.csv")
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    write_manifest(out, cfg, "generate", vocab_hash=vocab.digest(),
                   datasets={ds.split: file_hash(out / f"{ds.split}.csv") for ds in splits},
                   n_frames=cfg.n_frames)
    status = commit(out, final, force)
    print(f"dataset {final}: {status} ({cfg.n_frames} frames, "
          + ", ".join(f"{ds.split}={len(ds.videos)} videos" for ds in splits) + ")")
    return EXIT_OK


def _read_stats_source(path: Path, cfg: ExperimentConfig) -> Dataset:
    if path.is_dir():
        vocab = load_vocabulary(path / "vocab.txt") if (path / "vocab.txt").is_file() else resolve_vocab(cfg)
        path = path / "annotations.csv"
    else:
        side = path.parent / "vocab.txt"
        vocab = load_vocabulary(side) if side.is_file() else resolve_vocab(cfg)
    try:
        return load_annotations(path, vocab)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except AnnotationError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def stats_tables(ds: Dataset) -> dict[str, str]:
    """CSV text for the label frequencies and both co-occurrence matrices."""
    vocab = ds.vocab
    out = {}
    rows = [("axis", "name", "count")]
    for axis, names in zip(AXES, vocab.axes):
        rows += [(axis, n, int(c)) for n, c in zip(names, frequency_table(ds, axis))]
    out["frequency.csv"] = _csv(rows)
    for other in ("verb", "target"):
        table = cooccurrence_table(ds, ("instrument", other))
        names = vocab.axes[AXES.index(other)]
        rows = [(other, *vocab.instruments)]
        rows += [(name, *(int(x) for x in table[:, k])) for k, name in enumerate(names)]
        out[f"instrument_{other}.csv"] = _csv(rows)
    return out


def _csv(rows) -> str:
    import io
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_stats(cfg: ExperimentConfig, dataset: str | None = None, out_dir: str | None = None) -> int:
    src = Path(dataset) if dataset else cfg.dataset_dir
    ds = _read_stats_source(src, cfg)
    out = Path(out_dir) if out_dir else cfg.root_dir / "stats"
    out.mkdir(parents=True, exist_ok=True)
    for name, text in stats_tables(ds).items():
        (out / name).write_text(text, encoding="utf-8")
    print(f"{len(ds)} frames, {ds.triplet_instances()} triplet instances")
    for axis, names in zip(AXES, ds.vocab.axes):
        counts = frequency_table(ds, axis)
        print(f"{axis}: " + ", ".join(f"{n}={int(c)}" for n, c in zip(names, counts)))
    print(f"tables written to {out}")
    return EXIT_OK


def _train_into(out: Path, cfg: ExperimentConfig, store: Store, train_ds, val_ds, images=None) -> dict:
    tr_img = images[0] if images else store.images(train_ds)
    va_img = images[1] if images else store.images(val_ds)
    result = train(cfg.kind, train_ds, val_ds, tr_img, va_img, cfg.train_config(), cfg.model_config(),
                   log_path=out / "trainlog.jsonl")
    save_checkpoint(result.model, out / "checkpoint.zip",
                    extra={"best_epoch": result.best_epoch, "seed": cfg.seed, "config_hash": cfg.digest()})
    (out / "timings.json").write_text(json.dumps({"epoch_seconds": result.log.timings}) + "\n")
    return {"best_epoch": result.best_epoch, "best_val_ap_ivt": result.best_score, "result": result}


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> int:
    store = Store(cfg.dataset_dir)
    train_ds, val_ds = store.split("train"), store.split("val")
    final = cfg.run_dir / "train"
    final.parent.mkdir(parents=True, exist_ok=True)
    out = staging_dir(final)
    try:
        info = _train_into(out, cfg, store, train_ds, val_ds)
    except DivergenceError:
        shutil.rmtree(out)
        raise
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    write_manifest(out, cfg, "train", vocab_hash=store.vocab.digest(), datasets=store.hashes(),
                   checkpoint="checkpoint.zip", trainlog="trainlog.jsonl",
                   best_epoch=info["best_epoch"])
    status = commit(out, final, force)
    print(f"{cfg.kind} checkpoint {final / 'checkpoint.zip'}: {status} "
          f"(best epoch {info['best_epoch']}, val AP_IVT {info['best_val_ap_ivt']:.4f})")
    return EXIT_OK


def run_inference(model, images: np.ndarray, cfg: ExperimentConfig):
    heads = predict(model, images)
    inst = None
    if cfg.instrument_source == "branch" and "I" in heads:
        inst = 1.0 / (1.0 + np.exp(-heads["I"]))
    return heads, inst


def predicted_boxes(heads: dict, cfg: ExperimentConfig, image_size) -> list[list]:
    if "cam" not in heads:
        return [[] for _ in range(len(heads["probs"]))]
    probs = 1.0 / (1.0 + np.exp(-heads["I"]))
    return [cam_to_boxes(c, p, cfg.prob_thresh, cfg.cam_thresh_frac, image_size)
            for c, p in zip(heads["cam"], probs)]


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | None = None, dataset: str | None = None,
                 overlays: bool = False, force: bool = False) -> int:
    ckpt = Path(checkpoint or cfg.checkpoint or cfg.run_dir / "train" / "checkpoint.zip")
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    store = Store(Path(dataset) if dataset else cfg.dataset_dir)
    meta = read_checkpoint_meta(ckpt)
    if meta["vocab_hash"] != store.vocab.digest():
        raise ArtifactMismatch(f"checkpoint vocabulary {meta['vocab_hash'][:12]} does not match "
                               f"dataset vocabulary {store.vocab.digest()[:12]}")
    model, _ = load_checkpoint(ckpt)
    ds = store.split(cfg.eval_split)
    images = store.images(ds)
    heads, inst = run_inference(model, images, cfg)
    report = evaluate(heads["probs"], ds, instrument_scores=inst)
    final = cfg.run_dir / f"eval_{cfg.eval_split}"
    final.parent.mkdir(parents=True, exist_ok=True)
    out = staging_dir(final)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(meta["kind"]), encoding="utf-8")
    boxes = predicted_boxes(heads, cfg, images.shape[1:3])
    loc = None
    if (store.path / "boxes.csv").is_file():
        gt = load_boxes(store.path / "boxes.csv", store.vocab)
        gts = [[(b.instrument, b.as_tuple()) for b in gt.get((a.video_id, a.frame_index), [])] for a in ds]
        loc = dataset_localization_score(boxes, gts)
        loc = None if np.isnan(loc) else loc
    if overlays:
        (out / "overlays").mkdir()
        for k, ann in enumerate(ds):
            pred = decode_triplets(heads["probs"][k], cfg.threshold)
            img = render_overlay(images[k], ds.vocab, ann.triplets, pred, boxes[k])
            img.save(out / "overlays" / f"{ann.key}.png", format="PNG")
    write_manifest(out, cfg, "evaluate", vocab_hash=store.vocab.digest(), datasets=store.hashes(),
                   checkpoint=str(ckpt), checkpoint_hash=file_hash(ckpt),
                   report="report.json", localization=loc)
    status = commit(out, final, force)
    s = report.summary()
    print(f"report {final / 'report.json'}: {status}; " + ", ".join(f"{k} {v:.4f}" for k, v in s.items())
          + (f", localization {loc:.3f}" if loc is not None else ""))
    return EXIT_OK


def run_ablation(cfg: ExperimentConfig, out: Path, store: Store) -> list[dict]:
    """Train every variant for every seed and return one test-split row per run."""
    train_ds, val_ds, test_ds = store.split("train"), store.split("val"), store.split(cfg.eval_split)
    images = (store.images(train_ds), store.images(val_ds))
    test_images = store.images(test_ds)
    variants = list(ABLATION_VARIANTS)
    if cfg.ablate_baselines:
        variants.append(("naive", "naive", False, False, False, False, {}))
    rows = []
    for seed in cfg.ablate_seeds:
        for name, kind, fc, untrained, trained, cag, over in variants:
            vcfg = cfg.replace(kind=kind, seed=seed, **over)
            vdir = out / f"{name}_seed{seed}"
            vdir.mkdir()
            info = _train_into(vdir, vcfg, store, train_ds, val_ds, images)
            (vdir / "checkpoint.zip").unlink()
            heads, inst = run_inference(info["result"].model, test_images, vcfg)
            s = evaluate(heads["probs"], test_ds, instrument_scores=inst).summary()
            rows.append({"variant": name, "seed": seed, "FC": fc, "3D(untrained)": untrained,
                         "3D(trained)": trained, "CAG": cag, **s})
            log.info("ablation %s seed %d: %s", name, seed, s)
    return rows


METRIC_COLS = ("AP_I", "AP_IV", "AP_IT", "AP_IVT")


def _table(rows, names, flags=True) -> str:
    header = (["variant", "FC", "3D(untrained)", "3D(trained)", "CAG"] if flags else ["model"]) + list(METRIC_COLS)
    out = [header]
    for name in names:
        sel = [r for r in rows if r["variant"] == name]
        means = [float(np.mean([r[c] for r in sel])) for c in METRIC_COLS]
        lead = [name] + (["x" if sel[0][f] else "" for f in ("FC", "3D(untrained)", "3D(trained)", "CAG")]
                         if flags else [])
        out.append(lead + [f"{100 * v:.2f}" for v in means])
    return _csv(out)


def cmd_ablate(cfg: ExperimentConfig, force: bool = False) -> int:
    store = Store(cfg.dataset_dir)
    final = cfg.run_dir / "ablation"
    final.parent.mkdir(parents=True, exist_ok=True)
    out = staging_dir(final)
    rows = run_ablation(cfg, out, store)
    (out / "table4.csv").write_text(_table(rows, [v[0] for v in ABLATION_VARIANTS]), encoding="utf-8")
    per_seed = [["variant", "seed", *METRIC_COLS]] + [
        [r["variant"], r["seed"], *(f"{r[c]:.6f}" for c in METRIC_COLS)] for r in rows]
    (out / "per_seed.csv").write_text(_csv(per_seed), encoding="utf-8")
    if cfg.ablate_baselines:
        renamed = [dict(r, variant={"FC": "MTL", "3D-trained+CAG": "Tripnet"}.get(r["variant"], r["variant"]))
                   for r in rows]
        (out / "baselines.csv").write_text(_table(renamed, ["naive", "MTL", "Tripnet"], flags=False),
                                           encoding="utf-8")
    write_manifest(out, cfg, "ablate", vocab_hash=store.vocab.digest(), datasets=store.hashes(),
                   seeds=list(cfg.ablate_seeds))
    status = commit(out, final, force)
    print(f"ablation {final}: {status}")
    print((final / "table4.csv").read_text(), end="")
    return EXIT_OK


COMMANDS = ("generate", "stats", "train", "evaluate", "ablate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="triplab", description="Surgical action-triplet recognition lab.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat key = value configuration file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--force", action="store_true", help="overwrite differing outputs")
    ap.add_argument("--overlays", action="store_true", help="evaluate: render prediction overlays")
    ap.add_argument("--kind", choices=("tripnet", "mtl", "naive"), help="train: model kind")
    ap.add_argument("--dataset", help="stats/evaluate: dataset directory or annotation CSV")
    ap.add_argument("--checkpoint", help="evaluate: checkpoint path")
    ap.add_argument("--out", help="stats: output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.kind:
        overrides["kind"] = args.kind
    try:
        cfg = load_config(args.config, overrides) if args.config else ExperimentConfig(**overrides)
        if args.command == "generate":
            return cmd_generate(cfg, args.force)
        if args.command == "stats":
            return cmd_stats(cfg, args.dataset, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.force)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, args.dataset, args.overlays, args.force)
        return cmd_ablate(cfg, args.force)
    except (ConfigError, AnnotationError) as exc:
        print(f"triplab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"triplab: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactMismatch as exc:
        print(f"triplab: mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"triplab: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
