"""Dataset splits, minority-class augmentation, training loop and checkpoints."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import DataValidationError, DivergenceError, HiqueRuntimeError
from .features import EmbeddedInterview, ModalityFeatures
from .metrics import Metrics, compute_metrics
from .model import HiQuE, ModelConfig, batch_from_interviews, bce_loss
from .structuring import Label

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DAIC_SPLIT = (107, 35, 47)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    learning_rate: float = 2e-4
    seed: int = 0
    augment: bool = True
    mask_count: int = 10
    augment_factor: int = 3
    # used by split_dataset when the data does not come pre-split
    split_sizes: tuple[int, int, int] = DAIC_SPLIT

    def __post_init__(self):
        self.split_sizes = tuple(int(v) for v in self.split_sizes)
        if not 0 <= self.mask_count <= 85:
            raise DataValidationError("mask_count must be in [0, 85]")
        if self.augment_factor < 1:
            raise DataValidationError("augment_factor must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise DataValidationError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_sizes"] = list(self.split_sizes)
        return d


@dataclass
class DataSplit:
    train: list[EmbeddedInterview]
    validation: list[EmbeddedInterview]
    test: list[EmbeddedInterview]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "validation", "test"):
            for iv in getattr(self, name):
                if iv.participant_id in seen:
                    raise DataValidationError(
                        f"participant {iv.participant_id} appears in both {seen[iv.participant_id]} and {name}"
                    )
                seen[iv.participant_id] = name

    def ids(self) -> dict[str, list[str]]:
        return {n: [iv.participant_id for iv in getattr(self, n)] for n in ("train", "validation", "test")}


def split_dataset(
    interviews: Sequence[EmbeddedInterview],
    seed: int,
    sizes: Sequence[int] = DAIC_SPLIT,
) -> DataSplit:
    """Stratified, seeded split with proportions taken from ``sizes``.

    When the corpus size equals ``sum(sizes)`` the split sizes are matched
    exactly; otherwise each class is divided in the same proportions.
    """
    weights = np.asarray(sizes, dtype=np.float64)
    weights /= weights.sum()
    rng = np.random.default_rng([seed, 7])
    parts: list[list[EmbeddedInterview]] = [[], [], []]
    by_class: dict[Optional[Label], list[EmbeddedInterview]] = {}
    for iv in sorted(interviews, key=lambda x: x.participant_id):
        by_class.setdefault(iv.label, []).append(iv)
    for label in sorted(by_class, key=lambda l: "" if l is None else l.value):
        members = by_class[label]
        order = rng.permutation(len(members))
        n = len(members)
        n_val = int(round(n * weights[1]))
        n_test = int(round(n * weights[2]))
        n_train = n - n_val - n_test
        cuts = [0, n_train, n_train + n_val, n]
        for p in range(3):
            parts[p].extend(members[i] for i in order[cuts[p] : cuts[p + 1]])
    return DataSplit(*parts)


def mask_slots(iv: EmbeddedInterview, slots: Sequence[int], suffix: str) -> EmbeddedInterview:
    """Copy of ``iv`` with the given zero-based slots removed from every modality."""
    slots = np.asarray(slots, dtype=np.int64)
    feats = []
    for mf in iv.modalities():
        mat, mask = mf.matrix.copy(), mf.mask.copy()
        mat[slots] = 0.0
        mask[slots] = False
        feats.append(ModalityFeatures(mf.modality, mat, mask))
    dropped = set((slots + 1).tolist())
    hierarchy = [p for p in iv.hierarchy if p.slot_index not in dropped]
    return EmbeddedInterview(f"{iv.participant_id}{suffix}", *feats, hierarchy=hierarchy, label=iv.label)


def augment_minority(
    train_set: Sequence[EmbeddedInterview],
    config: TrainConfig,
    seed: int,
    split_name: str = "train",
) -> list[EmbeddedInterview]:
    """Add ``augment_factor - 1`` randomly masked copies of every depressed interview.

    Each copy removes ``mask_count`` distinct occupied question slots from all
    three modalities. Normal interviews pass through untouched.
    """
    if split_name != "train":
        raise DataValidationError(f"augmentation is only allowed on the training split, not {split_name!r}")
    out = list(train_set)
    if config.augment_factor == 1:
        return out
    for i, iv in enumerate(train_set):
        if iv.label is None:
            raise DataValidationError(f"{iv.participant_id}: augmentation needs labels")
        if iv.label is not Label.DEPRESSION:
            continue
        occupied = np.flatnonzero(iv.slot_mask)
        k = min(config.mask_count, len(occupied))
        for j in range(1, config.augment_factor):
            rng = np.random.default_rng([seed, 11, i, j])
            chosen = np.sort(rng.choice(occupied, size=k, replace=False))
            out.append(mask_slots(iv, chosen, f"#aug{j}"))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    val_macro_f1: Optional[float]


@dataclass
class TrainResult:
    model: HiQuE
    best_epoch: int
    history: list[EpochRecord]
    checkpoint: dict = field(repr=False)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def predict_proba(model: HiQuE, interviews: Sequence[EmbeddedInterview], batch_size: int = 32) -> np.ndarray:
    """Depression-class probabilities with dropout disabled."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(interviews), batch_size):
            batch = batch_from_interviews(interviews[start : start + batch_size], model.config)
            out.append(model(batch)["probs"][:, 1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_model(model: HiQuE, interviews: Sequence[EmbeddedInterview]) -> tuple[float, Metrics]:
    probs = predict_proba(model, interviews)
    labels = np.array([iv.label.as_int for iv in interviews])
    loss = float(bce_loss(torch.as_tensor(probs), torch.as_tensor(labels)))
    metrics = compute_metrics(zip(labels.tolist(), (probs > 0.5).astype(int).tolist()))
    return loss, metrics


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: DataSplit,
    out: Union[str, Path, None] = None,
) -> TrainResult:
    """Adam on mean binary cross-entropy; keeps the best-validation-macro-F1 weights."""
    tc = train_config
    if not split.train:
        raise DataValidationError("training split is empty")
    torch.use_deterministic_algorithms(True)
    seed_everything(tc.seed)
    model = HiQuE(model_config)
    train_set = augment_minority(split.train, tc, tc.seed) if tc.augment else list(split.train)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
    labels_all = torch.as_tensor([iv.label.as_int for iv in train_set])

    history: list[EpochRecord] = []
    best_key, best_state, best_epoch = None, copy.deepcopy(model.state_dict()), 0
    for epoch in range(tc.epochs):
        model.train()
        order = np.random.default_rng([tc.seed, 3, epoch]).permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            batch = batch_from_interviews([train_set[i] for i in idx], model_config)
            loss = bce_loss(model(batch)["probs"][:, 1], labels_all[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, b, loss.item())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        record = EpochRecord(epoch, float(np.mean(losses)), None, None)
        if split.validation:
            val_loss, val_metrics = evaluate_model(model, split.validation)
            record.val_loss, record.val_macro_f1 = val_loss, val_metrics.macro_f1
            key = (val_metrics.macro_f1, -val_loss)
            if best_key is None or key > best_key:
                best_key, best_state, best_epoch = key, copy.deepcopy(model.state_dict()), epoch
        else:
            best_state, best_epoch = copy.deepcopy(model.state_dict()), epoch
        history.append(record)
        log.debug("epoch %d: train %.4f val %s f1 %s", epoch, record.train_loss, record.val_loss, record.val_macro_f1)

    model.load_state_dict(best_state)
    model.eval()
    checkpoint = make_checkpoint(model, tc, best_epoch, history, split)
    if out is not None:
        save_checkpoint(checkpoint, out)
    return TrainResult(model, best_epoch, history, checkpoint)


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(model: HiQuE, tc: TrainConfig, epoch: int, history, split: Optional[DataSplit]) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": tc.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "metadata": {
            "epoch": epoch,
            "seed": tc.seed,
            "history": [asdict(h) for h in history],
            "split": split.ids() if split is not None else None,
        },
    }


def save_checkpoint(checkpoint: dict, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(checkpoint, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> tuple[HiQuE, dict]:
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise HiqueRuntimeError(f"checkpoint {path} does not exist") from None
    except Exception as exc:
        raise HiqueRuntimeError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise HiqueRuntimeError(f"checkpoint {path} has unsupported format")
    model = HiQuE(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
