"""On-disk feature cache: one ``<participant>.npz`` per interview plus ``labels.csv``.

Each file is a standard NumPy ``.npz`` archive holding ``audio``, ``visual``,
``text`` (float32 matrices), the matching ``*_mask`` arrays and ``meta`` (a
UTF-8 JSON document with ``format_version``, participant id, label and
hierarchy). Archives are written with fixed zip timestamps so identical
inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import zipfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import DataValidationError
from .features import MODALITIES, EmbeddedInterview, ModalityFeatures
from .structuring import HierarchicalPosition, Label

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_deterministic_npz(path: Union[str, Path], arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arrays[name]))
    os.replace(tmp, path)


def save_interview(path: Union[str, Path], iv: EmbeddedInterview) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "participant_id": iv.participant_id,
        "label": iv.label.value if iv.label else None,
        "hierarchy": [p.to_dict() for p in iv.hierarchy],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for m in MODALITIES:
        arrays[m] = iv[m].matrix.astype(np.float32)
        arrays[f"{m}_mask"] = iv[m].mask
    write_deterministic_npz(path, arrays)


def load_interview(path: Union[str, Path]) -> EmbeddedInterview:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            feats = [ModalityFeatures(m, data[m], data[f"{m}_mask"]) for m in MODALITIES]
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise DataValidationError(f"{path}: unreadable feature file ({exc})") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DataValidationError(f"{path}: unsupported feature format_version {version!r}")
    return EmbeddedInterview(
        meta["participant_id"],
        *feats,
        hierarchy=[HierarchicalPosition.from_dict(h) for h in meta["hierarchy"]],
        label=Label(meta["label"]) if meta.get("label") else None,
    )


def save_corpus(directory: Union[str, Path], interviews: Iterable[EmbeddedInterview]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths, rows = [], []
    for iv in interviews:
        p = directory / f"{iv.participant_id}.npz"
        save_interview(p, iv)
        paths.append(p)
        rows.append((iv.participant_id, iv.label.value if iv.label else ""))
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "label"])
        w.writerows(sorted(rows))
    return paths


def load_corpus(directory: Union[str, Path]) -> list[EmbeddedInterview]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataValidationError(f"features directory {directory} does not exist")
    files = sorted(directory.glob("*.npz"))
    if not files:
        raise DataValidationError(f"no feature files (*.npz) in {directory}")
    return [load_interview(f) for f in files]


def read_labels(path: Union[str, Path]) -> dict[str, Label]:
    """Accepts ``participant_id,label`` or DAIC-WOZ ``Participant_ID,PHQ8_Binary`` columns."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            row = {k.strip(): v for k, v in row.items() if k}
            pid = row.get("participant_id") or row.get("Participant_ID")
            raw = row.get("label", row.get("PHQ8_Binary", row.get("PHQ_Binary")))
            if pid is None or raw is None:
                raise DataValidationError(f"{path}: need participant_id/label columns")
            out[str(pid).strip()] = Label.parse(raw)
    return out
