"""On-disk containers.

Every artifact is an ``.npz`` archive of named arrays plus a ``__meta__``
entry holding a JSON document with a ``format_version`` and ``kind``.
Manifests are plain JSON. All writes go through a temp file and
``os.replace`` so readers never observe a half-written file.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays and metadata; content is byte-stable for equal inputs."""
    doc = {"format_version": FORMAT_VERSION, "kind": kind, **(meta or {})}
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed entry timestamps keep reruns byte-identical (np.savez stamps "now")
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)
    _atomic_write_bytes(Path(path), buf.getvalue())


def load_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a trnet container (no __meta__)")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {meta.get('format_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} container, found {meta.get('kind')!r}")
    return arrays, meta


# -- phantoms -----------------------------------------------------------------

def save_image(path, image) -> None:
    save_container(
        path, "mpr_image",
        {"intensities": image.intensities, "narrowing": image.narrowing, "labels": image.labels},
        {"config": image.config.to_dict(), "source_id": image.source_id},
    )


def load_image(path):
    from .phantom import MPRImage, PhantomConfig

    arrays, meta = load_container(path, "mpr_image")
    return MPRImage(arrays["intensities"], arrays["narrowing"], arrays["labels"],
                    PhantomConfig.from_dict(meta["config"]), meta.get("source_id", ""))


def save_phantom_dataset(out_dir, images, root_seed: int | None = None) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for img in images:
        fname = f"{img.source_id}.npz"
        save_image(out_dir / fname, img)
        entries.append({"source_id": img.source_id, "file": fname,
                        "centerline_length": int(img.centerline_length),
                        "positive_voxels": int(img.labels.sum())})
    manifest = out_dir / "manifest.json"
    write_json(manifest, {"format_version": FORMAT_VERSION, "kind": "phantom_dataset",
                          "root_seed": root_seed, "images": entries})
    return manifest


def load_phantom_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = read_json(manifest_path)
    if doc.get("kind") != "phantom_dataset":
        raise ValueError(f"{manifest_path}: not a phantom dataset manifest")
    return [load_image(manifest_path.parent / e["file"]) for e in doc["images"]]


# -- sequences ----------------------------------------------------------------

def save_sequence(path, seq, role: str, sampling: dict) -> None:
    save_container(
        path, "volume_sequence",
        {"cubes": seq.cubes, "center_indices": np.asarray(seq.center_indices, dtype=np.int64),
         "labels": np.asarray(seq.labels, dtype=np.int8)},
        {"source_id": seq.source_id, "role": role, "sampling": sampling},
    )


def load_sequence(path):
    from .sampling import VolumeSequence

    arrays, meta = load_container(path, "volume_sequence")
    seq = VolumeSequence(arrays["cubes"], arrays["center_indices"].tolist(),
                         arrays["labels"].tolist(), meta["source_id"])
    return seq, meta["role"]


def save_sequence_dataset(out_dir, dataset, sampling: dict, root_seed: int | None = None,
                          phantom_manifest: str | None = None) -> Path:
    """Write a :class:`~trnet.sampling.SequenceDataset`.

    Training sequences go to ``seq_*.npz`` at the top level, evaluation
    sequences to ``eval/seq_*.npz``, ground-truth tracks to ``tracks.npz``.
    """
    out_dir = Path(out_dir)
    listing = {}
    for role, by_source, sub in (("train", dataset.train, ""), ("eval", dataset.eval, "eval/")):
        entries = []
        for sid in sorted(by_source):
            for seq in by_source[sid]:
                fname = f"{sub}seq_{len(entries):05d}.npz"
                save_sequence(out_dir / fname, seq, role, sampling)
                entries.append({"file": fname, "source_id": sid, "length": len(seq),
                                "positives": int(np.sum(seq.labels))})
        listing[role] = entries
    save_container(out_dir / "tracks.npz", "label_tracks",
                   {sid: np.asarray(t, dtype=np.int8) for sid, t in dataset.tracks.items()})
    manifest = out_dir / "manifest.json"
    write_json(manifest, {"format_version": FORMAT_VERSION, "kind": "sequence_dataset",
                          "root_seed": root_seed, "sampling": sampling, "tracks": "tracks.npz",
                          "phantom_manifest": phantom_manifest,
                          "sequences": listing["train"], "eval_sequences": listing["eval"]})
    return manifest


def load_sequence_dataset(manifest_path):
    from .sampling import SequenceDataset

    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = read_json(manifest_path)
    if doc.get("kind") != "sequence_dataset":
        raise ValueError(f"{manifest_path}: not a sequence dataset manifest")
    tracks, _ = load_container(manifest_path.parent / doc["tracks"], "label_tracks")
    ds = SequenceDataset(train={}, eval={}, tracks={k: v.astype(np.int8) for k, v in tracks.items()})
    for key, target in (("sequences", ds.train), ("eval_sequences", ds.eval)):
        for e in doc[key]:
            seq, _ = load_sequence(manifest_path.parent / e["file"])
            target.setdefault(seq.source_id, []).append(seq)
    for sid in ds.tracks:
        ds.train.setdefault(sid, [])
        ds.eval.setdefault(sid, [])
    return ds, doc


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], model_config, seed: int | None = None,
                    extra: dict | None = None) -> None:
    meta = {"model_config": model_config.to_dict(), "seed": seed}
    if extra:
        meta.update(extra)
    save_container(path, "checkpoint", params, meta)


def load_checkpoint(path):
    from .model import ModelConfig

    arrays, meta = load_container(path, "checkpoint")
    return arrays, ModelConfig.from_dict(meta["model_config"]), meta
