"""Ablation sweeps and per-question attention reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .features import MODALITIES, EmbeddedInterview, ModalityFeatures
from .metrics import Metrics
from .model import HiQuE, ModelConfig, batch_from_interviews
from .taxonomy import QuestionTaxonomy
from .training import DataSplit, TrainConfig, evaluate_model, train

log = logging.getLogger(__name__)

QE_MODES = ("none", "flat", "hierarchical")
ABLATION_COLUMNS = ["QE", "HQE", "QA-Module", "CM-Attention", "Aug", "Precision", "Recall", "F1", "WA-F1"]
EXTRA_COLUMNS = ["Setting", "Modalities", "G-Mean", "Error"]
_SHORT = {"audio": "A", "visual": "V", "text": "T"}


@dataclass(frozen=True)
class AblationSetting:
    question_embedding: str = "hierarchical"
    qa_module: bool = True
    cm_attention: bool = True
    augmentation: bool = True
    modalities: tuple[str, ...] = MODALITIES
    name: str = ""

    def __post_init__(self):
        if self.question_embedding not in QE_MODES:
            raise ValueError(f"question_embedding must be one of {QE_MODES}")
        mods = tuple(m for m in MODALITIES if m in self.modalities)
        if not mods or len(mods) != len(set(self.modalities)):
            raise ValueError(f"invalid modality selection {self.modalities!r}")
        object.__setattr__(self, "modalities", mods)
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        mods = "+".join(_SHORT[m] for m in self.modalities)
        parts = [self.question_embedding, mods]
        if not self.qa_module:
            parts.append("noQA")
        if not self.cm_attention:
            parts.append("noCM")
        if not self.augmentation:
            parts.append("noAug")
        return "/".join(parts)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSetting":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


COMPONENT_SETTINGS = (
    AblationSetting("none", name="N.Q.E"),
    AblationSetting("flat", name="Q.E"),
    AblationSetting(qa_module=False, cm_attention=False, name="w/o QA+CM"),
    AblationSetting(cm_attention=False, name="w/o CM"),
    AblationSetting(qa_module=False, name="w/o QA"),
    AblationSetting(augmentation=False, name="w/o Aug"),
    AblationSetting(name="full"),
)

MODALITY_SETTINGS = tuple(
    AblationSetting(modalities=mods, name="+".join(_SHORT[m] for m in mods))
    for mods in (
        ("audio",), ("visual",), ("text",),
        ("audio", "visual"), ("visual", "text"), ("audio", "text"),
        MODALITIES,
    )
)


# ---------------------------------------------------------------------------
# question-embedding variants


def collapse_to_single_segment(iv: EmbeddedInterview) -> EmbeddedInterview:
    """Whole-interview representation in slot 1: each modality's present rows averaged.

    Stand-in for re-extracting features over the unsegmented interview when
    only per-segment features are cached.
    """
    feats = []
    for mf in iv.modalities():
        mat = np.zeros_like(mf.matrix)
        mask = np.zeros_like(mf.mask)
        if mf.mask.any():
            mat[0] = mf.matrix[mf.mask].mean(axis=0)
            mask[0] = True
        feats.append(ModalityFeatures(mf.modality, mat, mask))
    return EmbeddedInterview(iv.participant_id, *feats, hierarchy=[], label=iv.label)


def strip_hierarchy(iv: EmbeddedInterview) -> EmbeddedInterview:
    return replace(iv, hierarchy=[])


def apply_question_embedding(interviews: Sequence[EmbeddedInterview], mode: str) -> list[EmbeddedInterview]:
    if mode == "hierarchical":
        return list(interviews)
    if mode == "flat":
        return [strip_hierarchy(iv) for iv in interviews]
    if mode == "none":
        return [collapse_to_single_segment(iv) for iv in interviews]
    raise ValueError(f"unknown question embedding mode {mode!r}")


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    setting: AblationSetting
    metrics: Optional[Metrics] = None
    error: Optional[str] = None

    def csv_row(self) -> dict:
        s, m = self.setting, self.metrics
        row = {
            "QE": int(s.question_embedding != "none"),
            "HQE": int(s.question_embedding == "hierarchical"),
            "QA-Module": int(s.qa_module),
            "CM-Attention": int(s.cm_attention),
            "Aug": int(s.augmentation),
            "Setting": s.name,
            "Modalities": "+".join(_SHORT[x] for x in s.modalities),
            "Error": self.error or "",
        }
        for col, attr in (
            ("Precision", "macro_precision"), ("Recall", "macro_recall"), ("F1", "macro_f1"),
            ("WA-F1", "weighted_f1"), ("G-Mean", "g_mean"),
        ):
            row[col] = f"{getattr(m, attr):.4f}" if m is not None else ""
        return row


def run_ablation(
    settings: Sequence[AblationSetting],
    split: DataSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> list[AblationRow]:
    """Train and test one model per setting on a shared split and seed.

    A failing setting is recorded in its row and the sweep continues.
    """
    rows = []
    for setting in settings:
        try:
            data = DataSplit(*(apply_question_embedding(part, setting.question_embedding)
                               for part in (split.train, split.validation, split.test)))
            mc = replace(
                model_config,
                modalities=setting.modalities,
                qa_module=setting.qa_module,
                cm_attention=setting.cm_attention,
            )
            tc = replace(train_config, augment=setting.augmentation)
            result = train(mc, tc, data)
            _, metrics = evaluate_model(result.model, data.test)
            rows.append(AblationRow(setting, metrics))
            log.info("ablation %s: macro F1 %.3f", setting.name, metrics.macro_f1)
        except Exception as exc:  # recorded, sweep continues
            log.exception("ablation setting %s failed", setting.name)
            rows.append(AblationRow(setting, error=f"{type(exc).__name__}: {exc}"))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS + EXTRA_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_row())


# ---------------------------------------------------------------------------
# attention reports


@dataclass
class AttentionReport:
    n_slots: int
    self_mass: dict[str, list[float]]  # modality -> per-slot mean received mass
    cross_mass: dict[str, list[float]]  # "a->b" -> per-slot mean received mass
    interviews: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def top_slots(self, modality: str, k: int = 5) -> list[int]:
        mass = np.asarray(self.self_mass[modality])
        return [int(i) + 1 for i in np.argsort(-mass, kind="stable")[:k]]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def received_mass(maps: torch.Tensor) -> np.ndarray:
    """Column means of head-averaged row-stochastic maps: ``(B, h, L, L) -> (B, L)``.

    Each interview's vector sums to one, so a uniform map gives ``1/L`` per slot.
    """
    return maps.double().mean(dim=1).mean(dim=1).numpy()


def attention_report(
    model: HiQuE,
    interviews: Sequence[EmbeddedInterview],
    taxonomy: Optional[QuestionTaxonomy] = None,
    batch_size: int = 32,
) -> AttentionReport:
    model.eval()
    cfg = model.config
    self_acc: dict[str, list[np.ndarray]] = {}
    cross_acc: dict[str, list[np.ndarray]] = {}
    drill = []
    with torch.no_grad():
        for start in range(0, len(interviews), batch_size):
            chunk = interviews[start : start + batch_size]
            out = model(batch_from_interviews(chunk, cfg))
            probs = out["probs"][:, 1].double().numpy()
            s_mass = {m: received_mass(v) for m, v in out["self_maps"].items()}
            c_mass = {p: received_mass(v) for p, v in out["cross_maps"].items()}
            for m, v in s_mass.items():
                self_acc.setdefault(m, []).append(v)
            for p, v in c_mass.items():
                cross_acc.setdefault(p, []).append(v)
            for b, iv in enumerate(chunk):
                drill.append(_drill_down(iv, b, s_mass, c_mass, float(probs[b]), taxonomy))

    def mean(acc):
        return {k: np.concatenate(v).mean(axis=0).tolist() for k, v in sorted(acc.items())}

    return AttentionReport(cfg.seq_len, mean(self_acc), mean(cross_acc), drill)


def _drill_down(iv, b, s_mass, c_mass, prob, taxonomy) -> dict:
    positions = {p.slot_index: p for p in iv.hierarchy}
    slots = []
    for k in np.flatnonzero(iv.slot_mask):
        slot = int(k) + 1
        pos = positions.get(slot)
        entry = None
        if taxonomy is not None:
            try:
                entry = taxonomy[slot]
            except KeyError:
                entry = None
        slots.append({
            "slot": slot,
            "text": entry.text if entry else None,
            "role": (pos.role.value if pos else entry.role.value if entry else None),
            "effective_topic_slot": pos.effective_topic_slot if pos else slot,
            "chain_depth": pos.chain_depth if pos else 0,
            "self": {m: float(v[b, k]) for m, v in s_mass.items()},
            "cross": {p: float(v[b, k]) for p, v in c_mass.items()},
        })
    return {
        "participant_id": iv.participant_id,
        "label": iv.label.value if iv.label else None,
        "p_depression": prob,
        "slots": slots,
    }


def plot_attention(report: AttentionReport, directory: Union[str, Path]) -> list[Path]:
    """One bar chart per modality (and per cross-modal direction) of mean received mass."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, mass in list(report.self_mass.items()) + list(report.cross_mass.items()):
        fig, ax = plt.subplots(figsize=(12, 3))
        ax.bar(np.arange(1, len(mass) + 1), mass)
        ax.axhline(1.0 / len(mass), color="grey", lw=0.8, ls="--")
        ax.set_xlabel("question slot")
        ax.set_ylabel("attention score")
        ax.set_title(name)
        ax.set_xlim(0, len(mass) + 1)
        fig.tight_layout()
        path = directory / f"attention_{name.replace('->', '_to_')}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
