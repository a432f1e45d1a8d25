"""Pre-norm decoder-only transformer with a linear reward head."""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from ..errors import (
    DataFormatError,
    DegenerateInputError,
    SequenceTooLongError,
    ShapeMismatchError,
    UnknownTokenError,
)
from ..numerics import layer_norm, softmax
from .adapters import (
    AttentionParams,
    BlockOutput,
    BlockParams,
    ForwardOutput,
    MLPParams,
    get_adapter,
)
from .config import BOS, SEP, TransformerConfig

Hook = Callable[[np.ndarray], np.ndarray]


def hook_name(kind: str, layer: int) -> str:
    """Hook point for ``kind`` in {"attn", "mlp", "resid"} at block ``layer``.

    ``hook_name("resid", -1)`` is the embedding output.
    """
    if kind == "resid":
        return "embed" if layer == -1 else f"blocks.{layer}.resid_post"
    if kind in ("attn", "mlp"):
        return f"blocks.{layer}.{kind}_out"
    raise ValueError(f"unknown hook kind {kind!r}")


def component_names(n_layers: int) -> list[str]:
    names = ["embed"]
    for l in range(n_layers):
        names += [f"attn_L{l}", f"mlp_L{l}"]
    return names


def expected_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f, V, T = config.d_model, config.d_mlp, config.vocab_size, config.max_seq
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W_E": (V, d),
        "embed.W_pos": (T, d),
        "ln_final.w": (d,),
        "ln_final.b": (d,),
        "head.W": (config.n_objectives, d),
        "head.b": (config.n_objectives,),
    }
    for l in range(config.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.w": (d,), p + "ln1.b": (d,),
            p + "attn.W_Q": (d, d), p + "attn.W_K": (d, d), p + "attn.W_V": (d, d),
            p + "attn.W_O": (d, d), p + "attn.b_O": (d,),
            p + "ln2.w": (d,), p + "ln2.b": (d,),
            p + "mlp.W_in": (d, f), p + "mlp.b_in": (f,),
            p + "mlp.W_out": (f, d), p + "mlp.b_out": (d,),
        })
    return shapes


def final_token_positions(attention_mask) -> np.ndarray:
    """Index of the last real token per row of a right-padded 0/1 mask."""
    mask = np.atleast_2d(np.asarray(attention_mask))
    T = mask.shape[1]
    return np.clip(mask.sum(axis=1).astype(np.int64) - 1, 0, T - 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    preferred: str
    dispreferred: str
    dimension: str | None = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise DataFormatError("preference pair has an empty prompt")

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.prompt, self.dispreferred, self.preferred, self.dimension)


@dataclass(frozen=True)
class PairScore:
    preferred: float
    dispreferred: float

    @property
    def differential(self) -> float:
        return self.preferred - self.dispreferred


@dataclass(frozen=True)
class ActivationCache:
    """Final-token activations from one forward pass.

    ``residual[-1]`` is the embedding output and ``residual[l]`` the stream
    after block ``l``; with no hooks installed
    ``residual[l] == residual[l-1] + attn_out[l] + mlp_out[l]`` up to rounding.
    Full (T, d) tensors are kept only when requested.
    """

    tokens: tuple[int, ...]
    final_token_position: int
    residual: Mapping[int, np.ndarray]
    attn_out: Mapping[int, np.ndarray]
    mlp_out: Mapping[int, np.ndarray]
    reward: float
    objective_rewards: np.ndarray
    full_residual: Mapping[int, np.ndarray] | None = None
    full_attn_out: Mapping[int, np.ndarray] | None = None
    full_mlp_out: Mapping[int, np.ndarray] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.attn_out)

    @property
    def final_residual(self) -> np.ndarray:
        return self.residual[self.n_layers - 1]

    def component_vectors(self) -> list[np.ndarray]:
        """Residual contributions in component order: embed, attn_L0, mlp_L0, ..."""
        out = [self.residual[-1]]
        for l in range(self.n_layers):
            out += [self.attn_out[l], self.mlp_out[l]]
        return out


class RewardModel:
    """Weights, tokenizer table and head for one reward model.

    Parameters are stored float64 but hold float32-representable values, so a
    save/load round trip is exact. Instances are treated as immutable.
    """

    def __init__(self, config: TransformerConfig, params: Mapping[str, np.ndarray],
                 vocab, name: str = "model"):
        self.config = config
        self.name = name
        vocab = tuple(vocab)
        if len(vocab) != config.vocab_size:
            raise ShapeMismatchError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        if len(set(vocab)) != len(vocab):
            raise DataFormatError("vocabulary contains duplicate tokens")
        for special in (BOS, SEP):
            if special not in vocab:
                raise DataFormatError(f"vocabulary lacks the special token {special}")
        self.vocab = vocab
        self._index = {t: i for i, t in enumerate(vocab)}

        shapes = expected_shapes(config)
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        if missing:
            raise ShapeMismatchError(f"missing tensors: {missing[:5]}")
        if extra:
            raise ShapeMismatchError(f"unexpected tensors: {extra[:5]}")
        store = {}
        for k, shape in shapes.items():
            arr = np.asarray(params[k])
            if arr.shape != shape:
                raise ShapeMismatchError(f"{k}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"{k} contains non-finite values")
            store[k] = _readonly(arr)
        self.params: Mapping[str, np.ndarray] = MappingProxyType(store)

        self.blocks = tuple(self._block_params(l) for l in range(config.n_layers))
        self.adapter = get_adapter(config.head_kind)
        w, b = self.adapter.get_reward_head_params(self)
        self.reward_direction = _readonly(w)
        self.reward_bias = float(b)
        self.plant = None

    def _block_params(self, l: int) -> BlockParams:
        p, g = f"blocks.{l}.", self.params
        return BlockParams(
            index=l,
            ln1_w=g[p + "ln1.w"], ln1_b=g[p + "ln1.b"],
            attn=AttentionParams(g[p + "attn.W_Q"], g[p + "attn.W_K"], g[p + "attn.W_V"],
                                 g[p + "attn.W_O"], g[p + "attn.b_O"]),
            ln2_w=g[p + "ln2.w"], ln2_b=g[p + "ln2.b"],
            mlp=MLPParams(g[p + "mlp.W_in"], g[p + "mlp.b_in"], g[p + "mlp.W_out"], g[p + "mlp.b_out"]),
        )

    def __repr__(self):
        c = self.config
        return (f"RewardModel(name={self.name!r}, L={c.n_layers}, d={c.d_model}, "
                f"H={c.n_heads}, V={c.vocab_size}, head={c.head_kind})")

    # -- sizes -----------------------------------------------------------
    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def n_layers(self) -> int:
        return self.adapter.n_layers(self)

    @property
    def n_heads(self) -> int:
        return self.adapter.n_heads(self)

    @property
    def d_head(self) -> int:
        return self.config.d_head

    @property
    def component_names(self) -> list[str]:
        return component_names(self.n_layers)

    def per_objective_directions(self) -> np.ndarray:
        return self.adapter.per_objective_directions(self)

    # -- tokenizer -------------------------------------------------------
    def encode_words(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            try:
                ids.append(self._index[tok])
            except KeyError:
                raise UnknownTokenError(f"token {tok!r} is not in the vocabulary of {self.name}") from None
        return ids

    def tokenize(self, prompt: str, response: str) -> np.ndarray:
        """``<bos> prompt <sep> response`` as token ids."""
        ids = [self._index[BOS]] + self.encode_words(prompt) + [self._index[SEP]] + self.encode_words(response)
        if len(ids) > self.config.max_seq:
            raise SequenceTooLongError(f"{len(ids)} tokens exceed max_seq={self.config.max_seq}")
        return np.asarray(ids, dtype=np.int64)

    # -- forward ---------------------------------------------------------
    def _norm(self, x, w, b):
        if self.config.norm == "none":
            return x
        return layer_norm(x, w, b, self.config.ln_eps)

    def _attention(self, a: AttentionParams, xn: np.ndarray) -> np.ndarray:
        T = xn.shape[0]
        H, dh = self.config.n_heads, self.config.d_head
        q = (xn @ a.W_Q).reshape(T, H, dh)
        k = (xn @ a.W_K).reshape(T, H, dh)
        v = (xn @ a.W_V).reshape(T, H, dh)
        scores = np.einsum("thd,shd->hts", q, k) / np.sqrt(dh)
        scores = scores + np.triu(np.full((T, T), -np.inf), k=1)
        pattern = softmax(scores, axis=-1)
        z = np.einsum("hts,shd->thd", pattern, v).reshape(T, H * dh)
        return z @ a.W_O + a.b_O

    def _mlp(self, m: MLPParams, xn: np.ndarray) -> np.ndarray:
        pre = xn @ m.W_in + m.b_in
        post = np.maximum(pre, 0.0) if self.config.act == "relu" else _gelu(pre)
        return post @ m.W_out + m.b_out

    @staticmethod
    def _hook(hooks, name, x):
        fn = hooks.get(name)
        if fn is None:
            return x
        y = np.asarray(fn(x.copy()), dtype=np.float64)
        if y.shape != x.shape:
            raise ShapeMismatchError(f"hook {name} returned shape {y.shape}, expected {x.shape}")
        return y

    def _block(self, block: BlockParams, x: np.ndarray, hooks) -> BlockOutput:
        l = block.index
        attn = self._hook(hooks, hook_name("attn", l),
                          self._attention(self.adapter.get_attn_module(block),
                                          self._norm(x, block.ln1_w, block.ln1_b)))
        mid = x + attn
        mlp = self._hook(hooks, hook_name("mlp", l),
                         self._mlp(self.adapter.get_mlp_module(block),
                                   self._norm(mid, block.ln2_w, block.ln2_b)))
        out = self._hook(hooks, hook_name("resid", l), mid + mlp)
        return BlockOutput(resid_post=out, attn_out=attn, mlp_out=mlp)

    def run(self, ids, hooks: Mapping[str, Hook] | None = None,
            cache_full_sequences: bool = False) -> ActivationCache:
        """Forward pass over token ids with optional replacement hooks.

        A hook receives a copy of the full (T, d) tensor at its point and returns
        the tensor that continues through the network.
        """
        hooks = dict(hooks or {})
        ids = np.asarray(ids, dtype=np.int64)
        T = len(ids)
        if T == 0:
            raise DegenerateInputError("empty token sequence")
        if T > self.config.max_seq:
            raise SequenceTooLongError(f"{T} tokens exceed max_seq={self.config.max_seq}")
        final = int(final_token_positions(np.ones((1, T)))[0])

        W_E, W_pos = self.adapter.get_embedding(self)
        x = self._hook(hooks, "embed", W_E[ids] + W_pos[:T])
        resid, attn, mlp = {-1: x[final]}, {}, {}
        full_r, full_a, full_m = ({-1: x}, {}, {}) if cache_full_sequences else (None, None, None)
        for block in self.adapter.get_layers(self):
            out = self._block(block, x, hooks)
            l = block.index
            x = self.adapter.extract_layer_output(out)
            a, m = self.adapter.extract_attn_output(out), self.adapter.extract_mlp_output(out)
            resid[l], attn[l], mlp[l] = x[final], a[final], m[final]
            if cache_full_sequences:
                full_r[l], full_a[l], full_m[l] = x, a, m

        h = x[final]
        hn = self._norm(h, self.params["ln_final.w"], self.params["ln_final.b"])
        fwd = ForwardOutput(
            final_hidden=h,
            normed_hidden=hn,
            reward=float(self.reward_direction @ hn + self.reward_bias),
            objective_rewards=self.params["head.W"] @ hn + self.params["head.b"],
        )

        def freeze(d):
            return None if d is None else MappingProxyType({k: _readonly(v) for k, v in d.items()})

        return ActivationCache(
            tokens=tuple(int(i) for i in ids),
            final_token_position=final,
            residual=freeze(resid),
            attn_out=freeze(attn),
            mlp_out=freeze(mlp),
            reward=self.adapter.extract_reward(fwd, ids),
            objective_rewards=_readonly(fwd.objective_rewards),
            full_residual=freeze(full_r),
            full_attn_out=freeze(full_a),
            full_mlp_out=freeze(full_m),
        )

    def forward_with_cache(self, prompt: str, response: str,
                           cache_full_sequences: bool = False) -> tuple[float, ActivationCache]:
        cache = self.run(self.tokenize(prompt, response), cache_full_sequences=cache_full_sequences)
        return cache.reward, cache

    def score(self, prompt: str, response: str) -> float:
        return self.run(self.tokenize(prompt, response)).reward

    def score_objectives(self, prompt: str, response: str) -> np.ndarray:
        """Per-objective scores (length 1 for a scalar head)."""
        return np.array(self.run(self.tokenize(prompt, response)).objective_rewards)

    def score_pair(self, prompt: str, preferred: str, dispreferred: str) -> PairScore:
        return PairScore(self.score(prompt, preferred), self.score(prompt, dispreferred))

    def project_onto_reward(self, h) -> float:
        """``w_r . h + b_r`` with no final norm (the lens readout)."""
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.d_model,):
            raise ShapeMismatchError(f"expected a vector of length {self.d_model}, got {h.shape}")
        return float(self.reward_direction @ h + self.reward_bias)

    # -- derived models --------------------------------------------------
    def with_params(self, updates: Mapping[str, np.ndarray], name: str | None = None) -> "RewardModel":
        params = dict(self.params)
        params.update(updates)
        return RewardModel(self.config, params, self.vocab, name or self.name)

    def with_head(self, weight, bias, name: str | None = None) -> "RewardModel":
        return self.with_params({"head.W": np.atleast_2d(weight), "head.b": np.atleast_1d(bias)}, name)


RewardModelBundle = RewardModel
