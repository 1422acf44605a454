"""Per-slot feature matrices for the three modalities.

Every interview is represented as three matrices on the same slot grid:
audio ``(85, 88)`` eGeMAPS functionals, visual ``(85, 272)`` landmark
mean/variance statistics, and text ``(85, 768)`` answer embeddings. Rows of
absent slots are exactly zero and flagged ``False`` in the modality mask.

Real acoustic and text extraction sit behind small adapter protocols; the
package never computes eGeMAPS itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .encoders import TextEncoder
from .errors import AdapterConfigurationError, DataValidationError
from .structuring import HierarchicalPosition, Label, SlotLayout, StructuredInterview
from .taxonomy import N_PRIMARY, N_QUESTIONS, Role

log = logging.getLogger(__name__)

MODALITIES = ("audio", "visual", "text")
MODALITY_DIMS = {"audio": 88, "visual": 272, "text": 768}
N_LANDMARKS = 68


@dataclass
class ModalityFeatures:
    modality: str
    matrix: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.validate()

    def validate(self) -> None:
        width = MODALITY_DIMS[self.modality]
        if self.matrix.ndim != 2 or self.matrix.shape[1] != width:
            raise DataValidationError(
                f"{self.modality} matrix must be (n_slots, {width}), got {self.matrix.shape}"
            )
        if self.mask.shape != (self.matrix.shape[0],):
            raise DataValidationError(f"{self.modality} mask shape {self.mask.shape} does not match matrix")
        if not np.isfinite(self.matrix).all():
            raise DataValidationError(f"{self.modality} matrix contains NaN/Inf")
        if np.any(self.matrix[~self.mask] != 0):
            raise DataValidationError(f"{self.modality} matrix has non-zero rows in absent slots")

    @property
    def n_slots(self) -> int:
        return self.matrix.shape[0]


@dataclass
class EmbeddedInterview:
    participant_id: str
    audio: ModalityFeatures
    visual: ModalityFeatures
    text: ModalityFeatures
    hierarchy: list[HierarchicalPosition] = field(default_factory=list)
    label: Optional[Label] = None

    def __post_init__(self):
        n = {m.n_slots for m in self.modalities()}
        if len(n) != 1:
            raise DataValidationError(f"{self.participant_id}: modalities disagree on slot count {n}")

    def modalities(self) -> tuple[ModalityFeatures, ModalityFeatures, ModalityFeatures]:
        return self.audio, self.visual, self.text

    def __getitem__(self, modality: str) -> ModalityFeatures:
        return getattr(self, modality)

    @property
    def n_slots(self) -> int:
        return self.audio.n_slots

    @property
    def slot_mask(self) -> np.ndarray:
        """Slots present in at least one modality."""
        return self.audio.mask | self.visual.mask | self.text.mask

    def hierarchy_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-based effective topic slot and chain depth per slot (0 where unknown)."""
        topic = np.arange(self.n_slots, dtype=np.int64)
        depth = np.zeros(self.n_slots, dtype=np.int64)
        for pos in self.hierarchy:
            k = pos.slot_index - 1
            if 0 <= k < self.n_slots:
                topic[k] = pos.effective_topic_slot - 1
                depth[k] = pos.chain_depth
        return topic, depth


# ---------------------------------------------------------------------------
# visual


def compute_landmark_stats(frames) -> tuple[np.ndarray, bool]:
    """Mean and population variance of ``[x_1..x_68, y_1..y_68]`` over frames.

    ``frames`` has shape ``(n_frames, 68, 2)``. An empty segment (no face
    detected) gives a zero vector and ``present=False``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        return np.zeros(4 * N_LANDMARKS), False
    if frames.ndim != 3 or frames.shape[1:] != (N_LANDMARKS, 2):
        raise DataValidationError(f"landmark frames must be (n, {N_LANDMARKS}, 2), got {frames.shape}")
    if not np.isfinite(frames).all():
        raise DataValidationError("landmark coordinates must be finite")
    flat = np.concatenate([frames[:, :, 0], frames[:, :, 1]], axis=1)
    # offset by the first frame so constant tracks give exactly zero variance
    ref = flat[0]
    shifted = flat - ref
    return np.concatenate([shifted.mean(axis=0) + ref, shifted.var(axis=0)]), True


def sample_frames_per_second(timestamps: np.ndarray, span: tuple[float, float], rate: float = 1.0) -> np.ndarray:
    """Indices of the frames nearest to each sampling instant within ``span``."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    start, end = span
    if len(timestamps) == 0 or end <= start:
        return np.zeros(0, dtype=np.int64)
    instants = np.arange(start, end, 1.0 / rate)
    idx = np.searchsorted(timestamps, instants)
    idx = np.clip(idx, 0, len(timestamps) - 1)
    prev = np.clip(idx - 1, 0, len(timestamps) - 1)
    closer_prev = np.abs(timestamps[prev] - instants) < np.abs(timestamps[idx] - instants)
    idx = np.where(closer_prev, prev, idx)
    inside = (timestamps[idx] >= start) & (timestamps[idx] <= end)
    return np.unique(idx[inside])


@dataclass
class LandmarkTrack:
    """Landmark frames for a whole interview (e.g. a DAIC-WOZ ``CLNF_features.txt``)."""

    timestamps: np.ndarray
    frames: np.ndarray  # (n, 68, 2)
    success: np.ndarray

    @classmethod
    def read_clnf(cls, path) -> "LandmarkTrack":
        import pandas as pd

        df = pd.read_csv(path, skipinitialspace=True)
        df.columns = [c.strip() for c in df.columns]
        xs = df[[f"x{i}" for i in range(N_LANDMARKS)]].to_numpy(np.float64)
        ys = df[[f"y{i}" for i in range(N_LANDMARKS)]].to_numpy(np.float64)
        return cls(df["timestamp"].to_numpy(np.float64), np.stack([xs, ys], axis=-1), df["success"].to_numpy() == 1)

    def segment_stats(self, span: tuple[float, float]) -> tuple[np.ndarray, bool]:
        idx = sample_frames_per_second(self.timestamps, span)
        idx = idx[self.success[idx]] if len(idx) else idx
        return compute_landmark_stats(self.frames[idx])


# ---------------------------------------------------------------------------
# audio


class AcousticAdapter(Protocol):
    name: str
    reentrant: bool

    def extract(self, waveform: np.ndarray, sample_rate: int, slot: Optional[int] = None) -> np.ndarray:
        """88 functionals for one segment."""


class OpenSmileAdapter:
    """eGeMAPSv02 functionals via the ``opensmile`` Python package."""

    name = "opensmile"
    reentrant = False

    def __init__(self):
        try:
            import opensmile
        except ImportError as exc:
            raise AdapterConfigurationError(
                "the 'opensmile' package is required for real acoustic features (pip install opensmile)"
            ) from exc
        self._smile = opensmile.Smile(
            feature_set=opensmile.FeatureSet.eGeMAPSv02,
            feature_level=opensmile.FeatureLevel.Functionals,
        )

    def extract(self, waveform, sample_rate, slot=None):
        df = self._smile.process_signal(np.asarray(waveform, dtype=np.float32), sample_rate)
        return df.to_numpy(np.float64).reshape(-1)


class SyntheticAcousticAdapter:
    """Deterministic stand-in keyed on ``(seed, slot)``; ignores the waveform content."""

    name = "synthetic"
    reentrant = True

    def __init__(self, seed: int = 0):
        self.seed = seed

    def extract(self, waveform, sample_rate, slot=None):
        rng = np.random.default_rng([self.seed, -1 if slot is None else int(slot)])
        return rng.standard_normal(MODALITY_DIMS["audio"])


def get_acoustic_adapter(name: Optional[str], seed: int = 0) -> AcousticAdapter:
    if name is None or name == "none":
        raise AdapterConfigurationError("no acoustic adapter configured; choose 'opensmile' or 'synthetic'")
    if name == "opensmile":
        return OpenSmileAdapter()
    if name == "synthetic":
        return SyntheticAcousticAdapter(seed)
    raise AdapterConfigurationError(f"unknown acoustic adapter {name!r}")


def extract_audio_features(
    waveform: np.ndarray,
    sample_rate: int,
    adapter: Optional[AcousticAdapter],
    slot: Optional[int] = None,
) -> tuple[np.ndarray, bool]:
    if adapter is None:
        raise AdapterConfigurationError("no acoustic adapter configured")
    waveform = np.asarray(waveform)
    if waveform.size == 0:
        return np.zeros(MODALITY_DIMS["audio"]), False
    vec = np.asarray(adapter.extract(waveform, sample_rate, slot), dtype=np.float64)
    if vec.shape != (MODALITY_DIMS["audio"],):
        raise AdapterConfigurationError(f"acoustic adapter {adapter.name!r} returned shape {vec.shape}, expected (88,)")
    return np.nan_to_num(vec, nan=0.0, posinf=0.0, neginf=0.0), True


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float waveform in [-1, 1] from a PCM WAV file."""
    import wave

    with wave.open(str(path), "rb") as wf:
        sr, width, channels = wf.getframerate(), wf.getsampwidth(), wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    dtype = {1: np.uint8, 2: np.int16, 4: np.int32}[width]
    data = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if width == 1:
        data = data - 128.0
    data /= float(2 ** (8 * width - 1))
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return data, sr


# ---------------------------------------------------------------------------
# text


def extract_text_features(answer_text: str, encoder: TextEncoder) -> tuple[np.ndarray, bool]:
    if not answer_text.strip():
        return np.zeros(MODALITY_DIMS["text"]), False
    vec = np.asarray(encoder.encode(answer_text), dtype=np.float64)
    if vec.shape != (MODALITY_DIMS["text"],):
        raise AdapterConfigurationError(f"text encoder {encoder.name!r} returned shape {vec.shape}, expected (768,)")
    return vec, True


# ---------------------------------------------------------------------------
# assembling an interview


def embed_interview(
    interview: StructuredInterview,
    layout: SlotLayout,
    encoder: TextEncoder,
    acoustic: Optional[AcousticAdapter] = None,
    waveform: Optional[tuple[np.ndarray, int]] = None,
    landmarks: Optional[LandmarkTrack] = None,
) -> EmbeddedInterview:
    """Extract all three modalities for every occupied slot of ``layout``.

    A modality whose raw source is not supplied (no waveform, no landmark
    track) stays absent for the whole interview.
    """
    n = len(layout)
    mats = {m: np.zeros((n, MODALITY_DIMS[m])) for m in MODALITIES}
    masks = {m: np.zeros(n, dtype=bool) for m in MODALITIES}
    for k, occupant in enumerate(layout.slots):
        if occupant is None:
            continue
        seg, _ = occupant
        mats["text"][k], masks["text"][k] = extract_text_features(seg.answer_text, encoder)
        if waveform is not None:
            signal, sr = waveform
            chunks = [signal[int(t.start_time * sr) : int(t.end_time * sr)] for t in seg.answer_turns]
            audio = np.concatenate(chunks) if chunks else np.zeros(0)
            mats["audio"][k], masks["audio"][k] = extract_audio_features(audio, sr, acoustic, slot=k + 1)
        if landmarks is not None:
            mats["visual"][k], masks["visual"][k] = landmarks.segment_stats(seg.answer_span)
    hierarchy = [pos for occ in layout.slots if occ is not None for pos in [occ[1]]]
    return EmbeddedInterview(
        interview.participant_id,
        *(ModalityFeatures(m, mats[m], masks[m]) for m in MODALITIES),
        hierarchy=hierarchy,
        label=interview.label,
    )


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SyntheticConfig:
    """Class-conditional Gaussian corpus on the 85-slot grid.

    Rows in ``signal_slots`` are shifted by ``+signal_strength/2`` for
    depressed and ``-signal_strength/2`` for normal participants. When
    ``signal_parents`` is non-empty the shift is applied only to follow-up
    rows whose governing primary is one of those parents, so the label signal
    depends on the interview hierarchy.
    """

    n_depressed: int = 30
    n_normal: int = 60
    seed: int = 0
    signal_strength: float = 4.0
    signal_slots: tuple[int, ...] = (10, 20)
    signal_parents: tuple[int, ...] = ()
    parent_affinity: float = 0.8
    p_follow_up: float = 0.7
    p_primary: float = 0.9
    n_slots: int = N_QUESTIONS

    def validate(self) -> None:
        bad = [s for s in tuple(self.signal_slots) + tuple(self.signal_parents) if not 1 <= s <= self.n_slots]
        if bad:
            raise DataValidationError(f"signal slot indexes outside [1, {self.n_slots}]: {bad}")
        bad_parents = [s for s in self.signal_parents if s > N_PRIMARY]
        if bad_parents:
            raise DataValidationError(f"signal_parents must be primary slots (1..{N_PRIMARY}): {bad_parents}")
        if self.signal_strength < 0:
            raise DataValidationError("signal_strength must be non-negative")
        if self.n_depressed < 0 or self.n_normal < 0:
            raise DataValidationError("class counts must be non-negative")


def _synthetic_hierarchy(rng, present: np.ndarray, cfg: SyntheticConfig) -> list[HierarchicalPosition]:
    slots = np.flatnonzero(present) + 1
    primaries = [int(s) for s in slots if s <= N_PRIMARY]
    follow_ups = [int(s) for s in slots if N_PRIMARY < s <= N_QUESTIONS]
    positions = {p: HierarchicalPosition(p, Role.PRIMARY, p, 0) for p in primaries}
    chains: dict[int, int] = {}  # parent -> current chain depth
    signal_parents = [p for p in cfg.signal_parents if p in positions]
    for f in follow_ups:
        if not primaries:
            positions[f] = HierarchicalPosition(f, Role.FOLLOW_UP, f, 1, orphan=True)
            continue
        if f in cfg.signal_slots and signal_parents and rng.random() < cfg.parent_affinity:
            parent = int(rng.choice(signal_parents))
        else:
            parent = int(rng.choice(primaries))
        depth = chains.get(parent, 0) + 1
        chains[parent] = depth
        positions[f] = HierarchicalPosition(f, Role.FOLLOW_UP, parent, depth)
    # extension slots (beyond 85) are treated as stand-alone primaries
    for s in slots:
        if s > N_QUESTIONS:
            positions[int(s)] = HierarchicalPosition(int(s), Role.PRIMARY, int(s), 0)
    return [positions[int(s)] for s in slots]


def generate_synthetic_corpus(cfg: SyntheticConfig) -> list[EmbeddedInterview]:
    cfg.validate()
    labels = [Label.DEPRESSION] * cfg.n_depressed + [Label.NORMAL] * cfg.n_normal
    order = np.random.default_rng([cfg.seed, 0]).permutation(len(labels))
    is_primary = np.arange(1, cfg.n_slots + 1) <= N_PRIMARY
    signal_rows = np.array(cfg.signal_slots, dtype=np.int64) - 1
    out = []
    for i, j in enumerate(order):
        label = labels[j]
        rng = np.random.default_rng([cfg.seed, 1, i])
        present = np.where(is_primary, rng.random(cfg.n_slots) < cfg.p_primary, rng.random(cfg.n_slots) < cfg.p_follow_up)
        if not present.any():
            present[rng.integers(cfg.n_slots)] = True
        hierarchy = _synthetic_hierarchy(rng, present, cfg)
        topic = {p.slot_index: p.effective_topic_slot for p in hierarchy}
        sign = 0.5 if label is Label.DEPRESSION else -0.5
        shifted = [
            k for k in signal_rows
            if present[k] and (not cfg.signal_parents or topic.get(k + 1) in cfg.signal_parents)
        ]
        feats = []
        for m in MODALITIES:
            mat = rng.standard_normal((cfg.n_slots, MODALITY_DIMS[m]))
            mat[shifted] += sign * cfg.signal_strength
            mat[~present] = 0.0
            feats.append(ModalityFeatures(m, mat, present.copy()))
        out.append(EmbeddedInterview(f"syn{i:04d}", *feats, hierarchy=hierarchy, label=label))
    return out


def class_counts(interviews: Iterable[EmbeddedInterview]) -> dict[str, int]:
    counts = {Label.NORMAL.value: 0, Label.DEPRESSION.value: 0}
    for iv in interviews:
        if iv.label is not None:
            counts[iv.label.value] += 1
    return counts


def stack_modality(interviews: Sequence[EmbeddedInterview], modality: str) -> tuple[np.ndarray, np.ndarray]:
    mats = np.stack([iv[modality].matrix for iv in interviews])
    masks = np.stack([iv[modality].mask for iv in interviews])
    return mats, masks
