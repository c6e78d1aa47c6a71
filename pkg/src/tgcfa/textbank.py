"""Label descriptions, frozen text encoders and the per-label embedding table.

Each label carries ``v`` free-text descriptions. Every description is
embedded by a frozen text encoder and the label's row in the table is the
plain arithmetic mean of its variant embeddings.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .errors import EncoderError, FormatError, SchemaError, ValidationError

__all__ = [
    "LabelDescriptor",
    "DescriptionSet",
    "TextEmbeddingTable",
    "TextEncoderProvider",
    "StubTextEncoder",
    "ImportedTextEncoder",
    "PretrainedTextEncoder",
    "TruncationWarning",
    "load_descriptions",
    "embed_text",
    "aggregate_label_embedding",
    "build_table",
    "save_table",
    "load_table",
    "make_provider",
    "packaged_descriptions",
]

TABLE_MAGIC = b"TGTB"
TABLE_VERSION = 1


class TruncationWarning(UserWarning):
    """Text was longer than the provider's token limit and got truncated."""


@dataclass(frozen=True)
class LabelDescriptor:
    label_id: int
    label_name: str
    descriptions: tuple[str, ...]

    def __post_init__(self):
        if not self.descriptions:
            raise ValidationError(f"label {self.label_id} ({self.label_name!r}) has no descriptions")
        for i, text in enumerate(self.descriptions):
            if not text.strip():
                raise ValidationError(f"label {self.label_id} description {i} is empty")


@dataclass(frozen=True)
class DescriptionSet:
    labels: tuple[LabelDescriptor, ...]
    background_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValidationError("a description set needs at least one label")
        ids = [d.label_id for d in self.labels]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate label_id(s): {dup}")
        if sorted(ids) != list(range(len(ids))):
            raise ValidationError(f"label ids must be contiguous from 0, got {sorted(ids)}")
        if self.background_id is not None and self.background_id not in ids:
            raise ValidationError(f"background_id {self.background_id} is not a label id")
        # keep rows ordered by id so row r of the table is label r
        object.__setattr__(self, "labels", tuple(sorted(self.labels, key=lambda d: d.label_id)))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def names(self) -> list[str]:
        return [d.label_name for d in self.labels]


@dataclass(frozen=True, eq=False)
class TextEmbeddingTable:
    """Immutable ``n x k`` float32 matrix, one row per label."""

    embeddings: np.ndarray
    label_names: tuple[str, ...]
    encoder_fingerprint: str

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float32, copy=True)
        if emb.ndim != 2 or emb.shape[0] == 0 or emb.shape[1] == 0:
            raise ValidationError(f"embedding table must be a non-empty n x k matrix, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embedding table contains non-finite values")
        if len(self.label_names) != emb.shape[0]:
            raise ValidationError(f"{len(self.label_names)} label names for {emb.shape[0]} rows")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def k(self) -> int:
        return self.embeddings.shape[1]

    def as_tensor(self, device=None):
        import torch

        return torch.tensor(self.embeddings, device=device)

    def __eq__(self, other):
        if not isinstance(other, TextEmbeddingTable):
            return NotImplemented
        return (
            self.label_names == other.label_names
            and self.encoder_fingerprint == other.encoder_fingerprint
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )


# --------------------------------------------------------------------------
# description files
# --------------------------------------------------------------------------

def _schema() -> dict:
    text = resources.files("tgcfa.data").joinpath("descriptions.schema.json").read_text()
    return json.loads(text)


def packaged_descriptions(name: str) -> Path:
    """Path of a description file shipped with the package (``synth`` or ``abdomen``)."""
    path = resources.files("tgcfa.data").joinpath(f"{name}.json")
    if not path.is_file():
        raise ValidationError(f"no packaged description set named {name!r}")
    return Path(str(path))


def load_descriptions(path) -> DescriptionSet:
    """Parse and validate a JSON description file.

    Raises:
        SchemaError: malformed JSON (with line/column) or a schema violation
            (with the JSON path of the offending field).
        ValidationError: duplicate or non-contiguous label ids.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"description file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{path}: field {where}: {exc.message}") from exc
    labels = tuple(
        LabelDescriptor(int(e["id"]), e["name"], tuple(e["descriptions"])) for e in doc["labels"]
    )
    return DescriptionSet(labels, doc.get("background_id"))


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

class TextEncoderProvider(ABC):
    """A frozen text encoder. ``encode`` must be deterministic and stateless."""

    dim: int
    max_tokens: int = 77

    @property
    @abstractmethod
    def fingerprint(self) -> str: ...

    @abstractmethod
    def encode(self, text: str) -> np.ndarray:
        """Return a float32 vector of length ``dim``."""


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class StubTextEncoder(TextEncoderProvider):
    """Deterministic hash-based encoder that needs no weights.

    Each lowercased token maps to a standard Gaussian vector seeded by a
    BLAKE2b digest of ``(seed, token)``; a text embeds to the normalised sum
    of its token vectors. Shared words therefore give correlated vectors.
    Token vectors are not normalised, so sums cannot cancel exactly even
    when ``dim`` is 1.
    """

    def __init__(self, dim: int = 64, seed: int = 0, max_tokens: int = 77):
        if dim < 1:
            raise ValidationError("stub encoder dim must be positive")
        self.dim = dim
        self.seed = seed
        self.max_tokens = max_tokens

    @property
    def fingerprint(self) -> str:
        return f"stub:k={self.dim}:seed={self.seed}:blake2b"

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError(f"text has no tokens: {text!r}")
        if len(tokens) > self.max_tokens:
            warnings.warn(
                f"text truncated from {len(tokens)} to {self.max_tokens} tokens", TruncationWarning,
                stacklevel=3,
            )
            tokens = tokens[: self.max_tokens]
        total = np.sum([self._token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(total)
        if norm < 1e-12:
            raise EncoderError(f"stub embedding collapsed to zero for {text!r}")
        return (total / norm).astype(np.float32)


class ImportedTextEncoder(TextEncoderProvider):
    """Look-up encoder over embeddings exported by an external script.

    File format (JSON)::

        {"encoder": "<name of the real model>",
         "embeddings": {"<description text>": [float, ...], ...}}
    """

    def __init__(self, path):
        path = Path(path)
        if not path.is_file():
            raise EncoderError(f"imported embedding file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            raw = doc["embeddings"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: not an embedding export ({exc})") from exc
        self._vectors = {}
        dims = set()
        for text, values in raw.items():
            vec = np.asarray(values, dtype=np.float32)
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise ValidationError(f"{path}: embedding for {text!r} is not a finite vector")
            dims.add(vec.shape[0])
            self._vectors[text] = vec
        if len(dims) != 1:
            raise ValidationError(f"{path}: embeddings have mismatched dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self._name = str(doc.get("encoder", "unknown"))
        self.max_tokens = 10**9

    @property
    def fingerprint(self) -> str:
        return f"import:{self._name}:k={self.dim}"

    def encode(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValidationError("cannot embed empty text")
        try:
            return self._vectors[text].copy()
        except KeyError:
            raise EncoderError(f"no imported embedding for {text!r}") from None


class PretrainedTextEncoder(TextEncoderProvider):
    """Live CLIP text tower through ``transformers`` (optional dependency).

    Only local weights are used; a missing model raises :class:`EncoderError`.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPModel, CLIPTokenizer

            self._tokenizer = CLIPTokenizer.from_pretrained(model_name, local_files_only=True)
            self._model = CLIPModel.from_pretrained(model_name, local_files_only=True).eval()
        except Exception as exc:  # missing package, weights or config
            raise EncoderError(f"pretrained encoder {model_name!r} unavailable: {exc}") from exc
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._torch = torch
        self._name = model_name
        self.dim = int(self._model.config.projection_dim)
        self.max_tokens = int(self._tokenizer.model_max_length)

    @property
    def fingerprint(self) -> str:
        return f"pretrained:{self._name}:k={self.dim}"

    def encode(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValidationError("cannot embed empty text")
        ids = self._tokenizer(text, truncation=False)["input_ids"]
        if len(ids) > self.max_tokens:
            warnings.warn(f"text truncated to {self.max_tokens} tokens", TruncationWarning, stacklevel=3)
        batch = self._tokenizer([text], truncation=True, max_length=self.max_tokens, return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_text_features(**batch)
        return feats[0].cpu().numpy().astype(np.float32)


def make_provider(kind: str, *, dim: int = 64, seed: int = 0, import_path=None,
                  model_name: str = "openai/clip-vit-base-patch32") -> TextEncoderProvider:
    if kind == "stub":
        return StubTextEncoder(dim=dim, seed=seed)
    if kind == "import":
        if import_path is None:
            raise ValidationError("provider 'import' needs an embedding export file")
        return ImportedTextEncoder(import_path)
    if kind == "pretrained":
        return PretrainedTextEncoder(model_name)
    raise ValidationError(f"unknown provider {kind!r}; choose stub, import or pretrained")


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def embed_text(encoder: TextEncoderProvider, text: str) -> np.ndarray:
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("cannot embed empty text")
    vec = np.asarray(encoder.encode(text), dtype=np.float32)
    if vec.shape != (encoder.dim,) or not np.all(np.isfinite(vec)):
        raise EncoderError(f"encoder returned an invalid vector of shape {vec.shape}")
    return vec


def aggregate_label_embedding(variants: Sequence[np.ndarray], normalize_variants: bool = False) -> np.ndarray:
    """Component-wise mean of the variant embeddings of one label.

    The mean is accumulated in float64 and rounded once to float32.
    With ``normalize_variants`` each variant is L2-normalised first.
    """
    if len(variants) == 0:
        raise ValidationError("cannot aggregate an empty list of embeddings")
    rows = [np.asarray(v, dtype=np.float64) for v in variants]
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ValidationError(f"variant embeddings have mismatched shapes {sorted(dims)}")
    stacked = np.stack(rows)
    if normalize_variants:
        stacked = stacked / np.linalg.norm(stacked, axis=1, keepdims=True)
    return (stacked.sum(axis=0) / len(rows)).astype(np.float32)


def build_table(dset: DescriptionSet, encoder: TextEncoderProvider,
                normalize_variants: bool = False) -> TextEmbeddingTable:
    rows = []
    for label in dset.labels:
        try:
            variants = [embed_text(encoder, t) for t in label.descriptions]
            rows.append(aggregate_label_embedding(variants, normalize_variants))
        except (EncoderError, ValidationError) as exc:
            raise type(exc)(f"label {label.label_id} ({label.label_name!r}): {exc}") from exc
    counts = ",".join(str(len(d.descriptions)) for d in dset.labels)
    fingerprint = f"{encoder.fingerprint}|v={counts}"
    if normalize_variants:
        fingerprint += "|normalized"
    return TextEmbeddingTable(np.stack(rows), tuple(dset.names), fingerprint)


# --------------------------------------------------------------------------
# binary table file
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def save_table(table: TextEmbeddingTable, path) -> None:
    """Write the ``TGTB`` container. Label names follow the matrix as a JSON
    trailer so the file is self-describing."""
    fp = table.encoder_fingerprint.encode("utf-8")
    names = json.dumps(list(table.label_names)).encode("utf-8")
    blob = (
        _HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.n, table.k, len(fp))
        + fp
        + table.embeddings.astype("<f4").tobytes()
        + struct.pack("<I", len(names))
        + names
    )
    Path(path).write_bytes(blob)


def load_table(path) -> TextEmbeddingTable:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"embedding table not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, k, fp_len = _HEADER.unpack_from(blob, 0)
    if magic != TABLE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n == 0 or k == 0:
        raise FormatError(f"{path}: empty dimensions n={n} k={k}")
    pos = _HEADER.size
    end = pos + fp_len + 4 * n * k
    if len(blob) < end:
        raise FormatError(f"{path}: truncated payload")
    fingerprint = blob[pos : pos + fp_len].decode("utf-8")
    pos += fp_len
    values = np.frombuffer(blob, dtype="<f4", count=n * k, offset=pos).reshape(n, k)
    pos = end
    names = [f"label_{i}" for i in range(n)]
    if len(blob) > pos:
        if len(blob) < pos + 4:
            raise FormatError(f"{path}: truncated name trailer")
        (nlen,) = struct.unpack_from("<I", blob, pos)
        raw = blob[pos + 4 : pos + 4 + nlen]
        if len(raw) != nlen:
            raise FormatError(f"{path}: truncated name trailer")
        try:
            names = json.loads(raw.decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"{path}: corrupt name trailer") from exc
        if len(names) != n:
            raise FormatError(f"{path}: {len(names)} names for {n} rows")
    return TextEmbeddingTable(values.astype(np.float32), tuple(names), fingerprint)
