"""Text-embedding adapters and token-level greedy-match similarity.

Two encoders are provided:

* :class:`HashingEncoder` -- dependency-free and deterministic. Tokens are
  embedded as sums of hashed character n-gram vectors and then mixed with
  their neighbours, which gives cheap context sensitivity. Used for tests,
  synthetic runs and question matching when no pretrained model is present.
* :class:`TransformersEncoder` -- wraps a locally available Hugging Face
  checkpoint (RoBERTa by default) and returns the first-token hidden state.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import AdapterConfigurationError

TEXT_DIM = 768
_TOKEN = re.compile(r"[a-z0-9_']+")


@runtime_checkable
class TextEncoder(Protocol):
    dim: int
    name: str

    def encode(self, text: str) -> np.ndarray:
        """Sequence-level summary vector, shape ``(dim,)``."""

    def token_embeddings(self, text: str) -> np.ndarray:
        """Contextual token vectors, shape ``(n_tokens, dim)``."""


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.replace("’", "'").lower())


@lru_cache(maxsize=65536)
def _ngram_vector(ngram: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(ngram.encode("utf-8"), digest_size=8).digest(), "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    vec.setflags(write=False)
    return vec


class HashingEncoder:
    name = "hashing"

    def __init__(self, dim: int = TEXT_DIM, ngram_range: tuple[int, int] = (3, 5), context_weight: float = 0.25):
        self.dim = dim
        self.ngram_range = ngram_range
        self.context_weight = context_weight

    def _token_vector(self, token: str) -> np.ndarray:
        padded = f"<{token}>"
        lo, hi = self.ngram_range
        grams = [padded[i : i + n] for n in range(lo, hi + 1) for i in range(len(padded) - n + 1)]
        grams.append(padded)  # whole-word feature
        vec = np.sum([_ngram_vector(g, self.dim) for g in grams], axis=0)
        return vec / np.linalg.norm(vec)

    def token_embeddings(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return np.zeros((0, self.dim))
        base = np.stack([self._token_vector(t) for t in tokens])
        ctx = np.zeros_like(base)
        ctx[1:] += base[:-1]
        ctx[:-1] += base[1:]
        return base + self.context_weight * ctx

    def encode(self, text: str) -> np.ndarray:
        tokens = self.token_embeddings(text)
        if len(tokens) == 0:
            return np.zeros(self.dim)
        vec = tokens.mean(axis=0)
        return vec / np.linalg.norm(vec)


class TransformersEncoder:
    """First-token ([CLS]/<s>) summary from a pretrained encoder.

    Only local files are used; a missing checkpoint raises
    :class:`AdapterConfigurationError` rather than silently degrading.
    """

    def __init__(self, model_name: str = "roberta-base", device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise AdapterConfigurationError(f"transformers is not installed: {exc}") from exc
        try:
            self._tok = AutoTokenizer.from_pretrained(model_name, local_files_only=True)
            self._model = AutoModel.from_pretrained(model_name, local_files_only=True).to(device).eval()
        except OSError as exc:
            raise AdapterConfigurationError(
                f"pretrained encoder {model_name!r} is not available locally: {exc}"
            ) from exc
        self._torch = torch
        self._device = device
        self.name = f"transformers:{model_name}"
        self.dim = int(self._model.config.hidden_size)

    def _hidden(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            batch = self._tok(text, return_tensors="pt", truncation=True, max_length=512).to(self._device)
            out = self._model(**batch).last_hidden_state[0]
        return out.cpu().numpy().astype(np.float64)

    def encode(self, text: str) -> np.ndarray:
        if not text.strip():
            return np.zeros(self.dim)
        return self._hidden(text)[0]

    def token_embeddings(self, text: str) -> np.ndarray:
        # drop the special tokens at both ends
        return self._hidden(text)[1:-1]


def get_encoder(name: str) -> TextEncoder:
    if name == "hashing":
        return HashingEncoder()
    if name.startswith("transformers"):
        _, _, model = name.partition(":")
        return TransformersEncoder(model or "roberta-base")
    raise AdapterConfigurationError(f"unknown text encoder {name!r}; use 'hashing' or 'transformers[:model]'")


def greedy_match_f1(cand: np.ndarray, ref: np.ndarray) -> float:
    """Token-level greedy cosine matching with F1 aggregation.

    Precision averages, over candidate tokens, the best cosine against any
    reference token; recall does the converse.
    """
    if len(cand) == 0 or len(ref) == 0:
        return 0.0
    c = cand / np.linalg.norm(cand, axis=1, keepdims=True)
    r = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    sim = c @ r.T
    precision = sim.max(axis=1).mean()
    recall = sim.max(axis=0).mean()
    if precision + recall <= 0:
        return 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return float(np.clip(f1, 0.0, 1.0))
