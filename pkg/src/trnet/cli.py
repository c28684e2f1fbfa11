"""Command-line entry point: ``trnet {phantom,build,train,evaluate,predict,report}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every
failure prints one line starting with ``error[config]:`` or
``error[runtime]:`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io, model as M, phantom, sampling, training
from .evaluation import (ConfusionCounts, aggregate_folds, compute_metrics,
                         confusion_for_predictions, format_table)
from .phantom import ConfigError

log = logging.getLogger("trnet")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class RuntimeFailure(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------

def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def _override(section: dict, **flags) -> dict:
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _phantom_configs(doc: dict, seed: int | None) -> list[phantom.PhantomConfig]:
    if "phantoms" in doc:
        out = []
        for i, d in enumerate(doc["phantoms"]):
            try:
                cfg = phantom.PhantomConfig.from_dict(d)
                cfg.validate()
            except ConfigError as exc:
                raise ConfigError(f"phantoms[{i}]: {exc}") from None
            except TypeError as exc:
                raise ConfigError(f"phantoms[{i}]: {exc}") from None
            out.append(cfg)
        return out
    if "random" in doc:
        spec = dict(doc["random"])
        count = spec.pop("count", None)
        if not isinstance(count, int) or count < 0:
            raise ConfigError("random.count must be a nonnegative integer")
        rseed = seed if seed is not None else spec.pop("seed", 0)
        spec.pop("seed", None)
        for key in ("length_range", "narrowing_range", "plaque_length_range"):
            if key in spec:
                spec[key] = tuple(spec[key])
        try:
            return phantom.random_configs(count, rseed, **spec)
        except TypeError as exc:
            raise ConfigError(f"random: {exc}") from None
    raise ConfigError("phantom config needs a 'phantoms' list or a 'random' section")


def _write_effective(out: Path, name: str, doc: dict) -> None:
    io.write_json(out / name, doc)


# -- commands -----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    doc = load_run_config(args.config)
    pdoc = doc.get("phantom", doc)
    configs = _phantom_configs(pdoc, args.seed)
    out = Path(args.out) if args.out else Path(doc.get("out", "run")) / "phantoms"
    images = phantom.generate_dataset(configs)
    io.save_phantom_dataset(out, images, root_seed=args.seed if args.seed is not None else doc.get("seed"))
    _write_effective(out, "effective_config.json",
                     {"phantoms": [c.to_dict() for c in configs], "seed": args.seed})
    voxels = sum(img.centerline_length for img in images)
    pos = sum(int(img.labels.sum()) for img in images)
    frac = pos / voxels if voxels else 0.0
    print(f"images: {len(images)}  centerline voxels: {voxels}  positive-voxel fraction: {frac:.4f}")
    print(f"manifest: {out / 'manifest.json'}")
    return EXIT_OK


def _sampling_from(args, doc) -> sampling.SamplingConfig:
    sec = _override(doc.get("sampling", {}), stride=args.stride, cube_side=args.cube_side,
                    max_seq_len=args.max_seq_len, jitter_max=args.jitter, rotate=args.rotate,
                    balance_trim=args.balance, seed=args.seed)
    cfg = sampling.SamplingConfig.from_dict(sec)
    cfg.validate()
    return cfg


def cmd_build(args) -> int:
    doc = load_run_config(args.config)
    cfg = _sampling_from(args, doc)
    manifest = Path(args.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise RuntimeFailure(f"phantom manifest not found: {manifest}")
    images = io.load_phantom_dataset(manifest)
    ds = sampling.build_dataset(images, cfg)
    out = Path(args.out or Path(doc.get("out", "run")) / "sequences")
    io.save_sequence_dataset(out, ds, cfg.to_dict(), root_seed=cfg.seed,
                             phantom_manifest=str(manifest.resolve()))
    _write_effective(out, "effective_config.json", {"sampling": cfg.to_dict()})
    n_seq = sum(len(v) for v in ds.train.values())
    n_pos = sum(int(np.sum(s.labels)) for v in ds.train.values() for s in v)
    n_ctr = sum(len(s) for v in ds.train.values() for s in v)
    print(f"sequences: {n_seq}  centers: {n_ctr}  positive centers: {n_pos}"
          f"  (eval sequences: {sum(len(v) for v in ds.eval.values())})")
    print(f"manifest: {out / 'manifest.json'}")
    return EXIT_OK


def _model_from(args, doc, sampling_doc: dict) -> M.ModelConfig:
    sec = _override(doc.get("model", {}), num_encoders=args.num_encoders, num_heads=args.num_heads,
                    ffn_hidden=args.ffn_hidden)
    sec["cube_side"] = sampling_doc["cube_side"]
    sec["max_seq_len"] = sampling_doc["max_seq_len"]
    cfg = M.ModelConfig.from_dict(sec)
    cfg.validate()
    return cfg


def _train_from(args, doc) -> training.TrainConfig:
    sec = _override(doc.get("train", {}), epochs=args.epochs, folds=args.folds,
                    val_fraction=args.val_fraction, batch_size=args.batch_size,
                    learning_rate=args.lr, optimizer=args.optimizer, seed=args.seed,
                    clip_norm=args.clip_norm, tolerance=args.tolerance,
                    online_augment=args.online_augment)
    cfg = training.TrainConfig.from_dict(sec)
    cfg.validate()
    return cfg


class OnlineResampler:
    """Per-epoch regeneration of augmented training sequences (picklable)."""

    def __init__(self, images, sampling_cfg: sampling.SamplingConfig):
        self.images = {img.source_id: img for img in images}
        self.sampling_cfg = sampling_cfg

    def __call__(self, train_ids):
        def resample(epoch):
            cfg = dataclasses.replace(self.sampling_cfg, seed=self.sampling_cfg.seed + epoch)
            imgs = [self.images[sid] for sid in train_ids]
            ds = sampling.build_dataset(imgs, cfg)
            return [s for sid in train_ids for s in ds.train[sid]]
        return resample


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    seq_manifest = Path(args.sequences)
    if seq_manifest.is_dir():
        seq_manifest = seq_manifest / "manifest.json"
    if not seq_manifest.exists():
        raise RuntimeFailure(f"sequence manifest not found: {seq_manifest}")
    ds, sdoc = io.load_sequence_dataset(seq_manifest)
    mcfg = _model_from(args, doc, sdoc["sampling"])
    tcfg = _train_from(args, doc)
    factory = None
    if tcfg.online_augment:
        if not sdoc.get("phantom_manifest"):
            raise ConfigError("online_augment needs the phantom dataset recorded in the sequence manifest")
        images = io.load_phantom_dataset(sdoc["phantom_manifest"])
        factory = OnlineResampler(images, sampling.SamplingConfig.from_dict(sdoc["sampling"]))
    out = Path(args.out or Path(doc.get("out", "run")) / "train")
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(out, "effective_config.json",
                     {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "sequences": str(seq_manifest.resolve())})
    result = training.run_cross_validation(ds, mcfg, tcfg, jobs=args.jobs, resample_factory=factory)
    folds = []
    failed = 0
    for fold, fr in zip(result.plan.folds, result.folds):
        ckpt = f"fold_{fr.fold:02d}.npz"
        log_name = f"fold_{fr.fold:02d}_log.tsv"
        io.write_text(out / log_name, training_log_tsv(fr.log))
        entry = {"fold": fr.fold, "train": fold.train, "val": fold.val, "test": fold.test,
                 "log": log_name, "status": "failed" if fr.failed else "ok",
                 "best_epoch": fr.best_epoch,
                 "best_metric": None if math.isinf(fr.best_metric) else fr.best_metric}
        if fr.error:
            entry["error"] = fr.error
        if fr.params is not None:
            io.save_checkpoint(out / ckpt, fr.params, mcfg, seed=tcfg.seed,
                               extra={"fold": fr.fold, "best_epoch": fr.best_epoch})
            entry["checkpoint"] = ckpt
        failed += fr.failed
        folds.append(entry)
        for row in fr.log:
            print(f"fold {fr.fold} epoch {row['epoch']} loss {row['train_loss']:.4f} "
                  f"val_acc {row['val_acc']:.3f} val_mcc {row['val_mcc']:.3f}")
    io.write_json(out / "cv_manifest.json", {
        "format_version": io.FORMAT_VERSION, "kind": "cv_manifest", "root_seed": tcfg.seed,
        "sequences": str(seq_manifest.resolve()), "model_config": mcfg.to_dict(),
        "train_config": tcfg.to_dict(), "folds": folds})
    print(f"cv manifest: {out / 'cv_manifest.json'}  ({len(folds) - failed}/{len(folds)} folds ok)")
    if failed:
        raise RuntimeFailure(f"{failed} fold(s) diverged; see cv_manifest.json")
    return EXIT_OK


def training_log_tsv(rows: list[dict]) -> str:
    if not rows:
        return "epoch\ttrain_loss\n"
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    cv_path = Path(args.manifest)
    if cv_path.is_dir():
        cv_path = cv_path / "cv_manifest.json"
    cv = io.read_json(cv_path)
    seq_manifest = Path(args.dataset) if args.dataset else Path(cv["sequences"])
    ds, _ = io.load_sequence_dataset(seq_manifest)
    tcfg = training.TrainConfig.from_dict(cv["train_config"])
    tol = args.tolerance if args.tolerance is not None else tcfg.tolerance
    rows, per_fold, pred_lines = [], [], ["source_id\tcenter\tp_nonsig\tp_sig\tpred\ttruth\tfold"]
    for entry in cv["folds"]:
        if "checkpoint" not in entry:
            log.warning("fold %s has no checkpoint; skipped", entry["fold"])
            continue
        params, mcfg, _ = io.load_checkpoint(cv_path.parent / entry["checkpoint"])
        seqs = [s for sid in entry["test"] for s in ds.eval.get(sid, [])]
        preds = M.predict_sequences(seqs, params, mcfg, tcfg.batch_size)
        counts = confusion_for_predictions(preds, ds.tracks, tol, tcfg.symmetric_tolerance)
        per_fold.append((entry["fold"], counts))
        if counts.total:
            rows.append((f"fold {entry['fold']}", compute_metrics(counts)))
        for p in preds:
            truth = ds.tracks[p.source_id]
            for c, pr, lab in zip(p.center_indices, p.probabilities, p.labels):
                pred_lines.append(f"{p.source_id}\t{c}\t{pr[0]:.6f}\t{pr[1]:.6f}\t{lab}\t{truth[c]}\t{entry['fold']}")
    if not per_fold:
        raise RuntimeFailure("no readable checkpoints in the manifest")
    pooled = aggregate_folds([c for _, c in per_fold])
    rows.append(("TR-Net (pooled)", pooled))
    out = Path(args.out or cv_path.parent)
    table = format_table(rows)
    io.write_text(out / "report.tsv", table)
    io.write_text(out / "test_predictions.tsv", "\n".join(pred_lines) + "\n")
    io.write_json(out / "report.json", {
        "tolerance": tol, "pooled": pooled.to_dict(),
        "folds": [{"fold": k, "counts": c.to_dict(),
                   "metrics": compute_metrics(c).to_dict() if c.total else None} for k, c in per_fold]})
    print(format_table(rows, sep="  "), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, mcfg, _ = io.load_checkpoint(args.checkpoint)
    image = io.load_image(args.image)
    cfg = sampling.SamplingConfig(stride=args.stride or 5, cube_side=mcfg.cube_side,
                                  max_seq_len=mcfg.max_seq_len, balance_trim=False)
    seqs = sampling.build_sequences(image, cfg, augment=False)
    preds = M.predict_sequences(seqs, params, mcfg)
    out = Path(args.out or ".")
    lines = ["center\tp_nonsig\tp_sig\tpred\ttruth"]
    for p in preds:
        for c, pr, lab in zip(p.center_indices, p.probabilities, p.labels):
            lines.append(f"{c}\t{pr[0]:.6f}\t{pr[1]:.6f}\t{lab}\t{int(image.labels[c])}")
    stem = Path(args.image).stem
    io.write_text(out / f"{stem}_predictions.tsv", "\n".join(lines) + "\n")
    n_sig = sum(int(p.labels.sum()) for p in preds)
    print(f"centers: {sum(len(p) for p in preds)}  predicted significant: {n_sig}")
    if args.plot:
        _plot_prediction(image, preds, out / f"{stem}_predictions.png")
    return EXIT_OK


def _plot_prediction(image, preds, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    c = image.axis
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.imshow(image.intensities[:, c, :].T, cmap="gray", aspect="auto")
    gt = np.flatnonzero(image.labels)
    ax.plot(gt, np.full(len(gt), c), "s", color="tab:red", ms=2, label="annotated significant")
    for p in preds:
        sig = [ci for ci, lab in zip(p.center_indices, p.labels) if lab]
        ax.plot(sig, [c] * len(sig), "x", color="orange", ms=8, mew=2)
    ax.plot([], [], "x", color="orange", label="predicted significant center")
    ax.set_xlabel("centerline index")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise RuntimeFailure(f"run directory not found: {run}")
    parts = [f"# Run report: {run}", ""]
    summary: dict = {"run": str(run)}
    for m in sorted(run.rglob("manifest.json")):
        doc = io.read_json(m)
        if doc.get("kind") == "phantom_dataset":
            imgs = doc["images"]
            vox = sum(e["centerline_length"] for e in imgs)
            pos = sum(e["positive_voxels"] for e in imgs)
            summary.setdefault("phantom_datasets", []).append(
                {"path": str(m), "images": len(imgs), "voxels": vox, "positive_voxels": pos})
            parts += [f"## Phantom dataset `{m.parent}`", "",
                      f"- images: {len(imgs)}", f"- centerline voxels: {vox}",
                      f"- positive voxels: {pos}", ""]
        elif doc.get("kind") == "sequence_dataset":
            seqs = doc["sequences"]
            summary.setdefault("sequence_datasets", []).append(
                {"path": str(m), "sequences": len(seqs),
                 "positive_centers": sum(e["positives"] for e in seqs)})
            parts += [f"## Sequence dataset `{m.parent}`", "",
                      f"- training sequences: {len(seqs)}",
                      f"- positive training centers: {sum(e['positives'] for e in seqs)}",
                      f"- evaluation sequences: {len(doc.get('eval_sequences', []))}", ""]
    for cvm in sorted(run.rglob("cv_manifest.json")):
        cv = io.read_json(cvm)
        parts += [f"## Cross-validation `{cvm.parent}`", "",
                  "| fold | status | best epoch | best val metric |", "|---|---|---|---|"]
        for f in cv["folds"]:
            bm = f.get("best_metric")
            parts.append(f"| {f['fold']} | {f['status']} | {f['best_epoch']} | "
                         f"{'--' if bm is None else f'{bm:.3f}'} |")
        parts.append("")
        summary.setdefault("cross_validation", []).append(
            {"path": str(cvm), "folds": len(cv["folds"]),
             "failed": sum(f["status"] != "ok" for f in cv["folds"])})
        report_tsv = cvm.parent / "report.tsv"
        if report_tsv.exists():
            lines = report_tsv.read_text().strip().splitlines()
            header = lines[0].split("\t")
            parts += ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
            parts += ["| " + " | ".join(l.split("\t")) + " |" for l in lines[1:]]
            parts.append("")
            summary.setdefault("reports", []).append(io.read_json(cvm.parent / "report.json"))
        if args.plot:
            _plot_curves(cvm.parent, cv, args.out or run)
    out = Path(args.out or run)
    io.write_text(out / "report.md", "\n".join(parts) + "\n")
    io.write_json(out / "report_summary.json", summary)
    print(f"report: {out / 'report.md'}")
    return EXIT_OK


def _plot_curves(train_dir: Path, cv: dict, out) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for f in cv["folds"]:
        rows = (train_dir / f["log"]).read_text().strip().splitlines()
        head = rows[0].split("\t")
        data = np.array([[float(v) for v in r.split("\t")] for r in rows[1:]])
        if not len(data):
            continue
        a1.plot(data[:, head.index("epoch")], data[:, head.index("train_loss")], lw=1)
        a2.plot(data[:, head.index("epoch")], data[:, head.index("val_mcc")], lw=1)
    a1.set_xlabel("epoch"), a1.set_ylabel("training loss")
    a2.set_xlabel("epoch"), a2.set_ylabel("validation MCC")
    fig.tight_layout()
    Path(out).mkdir(parents=True, exist_ok=True)
    fig.savefig(Path(out) / "training_curves.png", dpi=120)
    plt.close(fig)


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel folds")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = argparse.ArgumentParser(prog="trnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom dataset")
    sp.set_defaults(func=cmd_phantom)

    sb = sub.add_parser("build", parents=[common], help="build volume sequences from phantoms")
    sb.add_argument("dataset", help="phantom manifest or its directory")
    sb.add_argument("--stride", type=int)
    sb.add_argument("--cube-side", type=int)
    sb.add_argument("--max-seq-len", type=int)
    sb.add_argument("--jitter", type=int)
    sb.add_argument("--rotate", action=argparse.BooleanOptionalAction, default=None)
    sb.add_argument("--balance", action=argparse.BooleanOptionalAction, default=None)
    sb.set_defaults(func=cmd_build)

    st = sub.add_parser("train", parents=[common], help="cross-validated training")
    st.add_argument("sequences", help="sequence manifest or its directory")
    st.add_argument("--epochs", type=int)
    st.add_argument("--folds", type=int)
    st.add_argument("--val-fraction", type=float)
    st.add_argument("--batch-size", type=int)
    st.add_argument("--lr", type=float)
    st.add_argument("--optimizer", choices=training.OPTIMIZERS)
    st.add_argument("--clip-norm", type=float)
    st.add_argument("--tolerance", type=int)
    st.add_argument("--num-encoders", type=int)
    st.add_argument("--num-heads", type=int)
    st.add_argument("--ffn-hidden", type=int)
    st.add_argument("--online-augment", action=argparse.BooleanOptionalAction, default=None)
    st.set_defaults(func=cmd_train)

    se = sub.add_parser("evaluate", parents=[common], help="per-fold and pooled metrics table from checkpoints")
    se.add_argument("manifest", help="cv_manifest.json or its directory")
    se.add_argument("--dataset", help="sequence manifest (default: the one recorded at training)")
    se.add_argument("--tolerance", type=int)
    se.set_defaults(func=cmd_evaluate)

    sq = sub.add_parser("predict", parents=[common], help="per-center predictions for one image")
    sq.add_argument("checkpoint")
    sq.add_argument("image")
    sq.add_argument("--stride", type=int)
    sq.add_argument("--plot", action="store_true")
    sq.set_defaults(func=cmd_predict)

    sr = sub.add_parser("report", parents=[common], help="consolidated run report")
    sr.add_argument("run", help="run directory")
    sr.add_argument("--plot", action="store_true")
    sr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, OSError, ValueError, FloatingPointError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
