from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources

from ..errors import ShapeMismatchError, UnknownHeadKindError, DataFormatError

BOS = "<bos>"
SEP = "<sep>"
SPECIAL_TOKENS = (BOS, SEP)

HEAD_KINDS = ("scalar", "multi_objective")
NORMS = ("layernorm", "none")
ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture sizes of a pre-norm decoder-only reward model.

    ``d_head`` defaults to ``d_model // n_heads``; an explicit value that breaks
    ``d_model == n_heads * d_head`` is rejected. ``norm="none"`` drops every layer
    norm (used by the planted toy models so their rewards have closed forms).
    """

    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    d_mlp: int | None = None
    d_head: int | None = None
    max_seq: int = 64
    head_kind: str = "scalar"
    n_objectives: int = 1
    norm: str = "layernorm"
    act: str = "gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise UnknownHeadKindError(f"unknown head_kind {self.head_kind!r}; expected one of {HEAD_KINDS}")
        if self.n_heads < 1 or self.d_model < 1:
            raise ShapeMismatchError("d_model and n_heads must be positive")
        if self.d_head is None:
            if self.d_model % self.n_heads:
                raise ShapeMismatchError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
            object.__setattr__(self, "d_head", self.d_model // self.n_heads)
        if self.d_model != self.n_heads * self.d_head:
            raise ShapeMismatchError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads}*{self.d_head}")
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        if self.n_layers < 1:
            raise ShapeMismatchError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ShapeMismatchError("vocab_size must be >= 2")
        if self.max_seq < 2:
            raise ShapeMismatchError("max_seq must be >= 2")
        if self.head_kind == "scalar" and self.n_objectives != 1:
            raise ShapeMismatchError("a scalar head has exactly one objective")
        if self.head_kind == "multi_objective" and self.n_objectives < 1:
            raise ShapeMismatchError("multi_objective head needs n_objectives >= 1")
        if self.norm not in NORMS:
            raise DataFormatError(f"unknown norm {self.norm!r}")
        if self.act not in ACTIVATIONS:
            raise DataFormatError(f"unknown activation {self.act!r}")

    @property
    def n_components(self) -> int:
        return 2 * self.n_layers + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataFormatError(f"bad config: {exc}") from None


@lru_cache(maxsize=1)
def shipped_lexicon() -> tuple[str, ...]:
    """Every whitespace token that appears in the bundled probe and concept files."""
    words: set[str] = set()
    data = resources.files("reward_lens") / "data"
    for entry in sorted(data.iterdir(), key=lambda p: p.name):
        if not entry.name.endswith(".jsonl"):
            continue
        for line in entry.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            for key, value in rec.items():
                if key in ("dimension", "concept", "term") or not isinstance(value, str):
                    continue
                words.update(value.split())
    return tuple(sorted(words))


def default_vocab(size: int) -> tuple[str, ...]:
    """Deterministic vocabulary: specials, letters, digits, the shipped lexicon, then fillers."""
    base = list(SPECIAL_TOKENS) + list(string.ascii_lowercase) + list(string.digits)
    seen = set(base)
    for w in shipped_lexicon():
        if w not in seen:
            base.append(w)
            seen.add(w)
    i = 0
    while len(base) < size:
        tok = f"tok{i}"
        i += 1
        if tok not in seen:
            base.append(tok)
    return tuple(base[:size])


def full_vocab_size() -> int:
    """Smallest vocabulary that covers the shipped lexicon."""
    return 2 + 26 + 10 + len([w for w in shipped_lexicon()
                              if w not in set(string.ascii_lowercase + string.digits)])
