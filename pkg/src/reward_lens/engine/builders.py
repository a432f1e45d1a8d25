"""Deterministic toy models.

``build_seeded_model`` gives generic random weights. The planted and length
builders zero every sublayer except a known circuit, so their rewards have
closed forms that the tests use as oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import DataFormatError, ShapeMismatchError
from ..tensorfile import to_float32_exact
from .config import TransformerConfig, default_vocab
from .model import RewardModel, expected_shapes


@dataclass(frozen=True)
class PlantedCircuit:
    layer: int
    component: str
    trigger_token: str
    trigger_id: int
    gain: float
    direction: np.ndarray   # requested unit direction u
    write: np.ndarray       # exact vector added per unit of trigger (float32-rounded c*u)

    def expected_shift(self, w_r: np.ndarray) -> float:
        return float(w_r @ self.write)


def _init(rng, name: str, shape, config: TransformerConfig, init_scale: float) -> np.ndarray:
    d, f = config.d_model, config.d_mlp
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "w" and ".ln" in f".{name}":
        return np.ones(shape)
    if leaf == "b" and ".ln" in f".{name}":
        return np.zeros(shape)
    if name == "embed.W_E":
        return rng.normal(0.0, 1.0, shape)
    if name == "embed.W_pos":
        return rng.normal(0.0, 0.5, shape)
    if name == "head.W":
        return rng.normal(0.0, 1.0 / np.sqrt(d), shape)
    if name == "head.b":
        return rng.normal(0.0, 0.1, shape)
    if leaf == "W_out":
        return rng.normal(0.0, init_scale / np.sqrt(f), shape)
    if leaf.startswith("W_"):
        return rng.normal(0.0, init_scale / np.sqrt(d), shape)
    return rng.normal(0.0, 0.02, shape)


def build_seeded_model(config: TransformerConfig, seed: int = 0, vocab=None,
                       init_scale: float = 1.0, name: str | None = None) -> RewardModel:
    """Random model from ``numpy.random.default_rng(seed)``.

    Tensors are drawn in sorted-name order. Projection matrices are
    N(0, init_scale^2 / fan_in), embeddings N(0, 1), layer norms start at
    identity. Values are rounded to float32 so the model survives a file round
    trip bit for bit.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for tname, shape in sorted(expected_shapes(config).items()):
        params[tname] = to_float32_exact(_init(rng, tname, shape, config, init_scale))
    vocab = default_vocab(config.vocab_size) if vocab is None else tuple(vocab)
    return RewardModel(config, params, vocab, name or f"seeded-{seed}")


def _sparse_config(config: TransformerConfig) -> TransformerConfig:
    return replace(config, norm="none", act="relu")


def _zero_sublayers(params: dict, config: TransformerConfig) -> None:
    for l in range(config.n_layers):
        p = f"blocks.{l}."
        params[p + "attn.W_O"] = np.zeros((config.d_model, config.d_model))
        params[p + "attn.b_O"] = np.zeros(config.d_model)
        params[p + "mlp.W_out"] = np.zeros((config.d_mlp, config.d_model))
        params[p + "mlp.b_out"] = np.zeros(config.d_model)


def build_planted_model(config: TransformerConfig, layer: int, trigger_token: str,
                        gain: float = 5.0, component: str = "mlp", direction=None,
                        seed: int = 0, head_orthogonal_to_embeddings: bool = False,
                        vocab=None) -> RewardModel:
    """Model whose only live sublayer writes ``gain * u`` when the trigger fires.

    Norms are removed and the activation is ReLU. Token embeddings are the
    standard basis rows (so V <= d is required) and positional embeddings are
    zero. With an MLP plant the reward is, exactly,
    ``w_r . (E[final] + write * 1[final == trigger]) + b_r``. An attention plant
    attends uniformly, so its write is scaled by the fraction of positions that
    hold the trigger.

    ``direction`` defaults to ``w_r / |w_r|``. With
    ``head_orthogonal_to_embeddings`` the head has no weight on the embedding
    coordinates, making the embedding contribution zero for every token.
    """
    if component not in ("attn", "mlp"):
        raise ValueError(f"component must be 'attn' or 'mlp', got {component!r}")
    config = _sparse_config(config)
    d, V = config.d_model, config.vocab_size
    if V > d:
        raise ShapeMismatchError(f"orthonormal embeddings need vocab_size <= d_model ({V} > {d})")
    if not 0 <= layer < config.n_layers:
        raise ValueError(f"plant layer {layer} outside 0..{config.n_layers - 1}")
    vocab = default_vocab(V) if vocab is None else tuple(vocab)
    if trigger_token not in vocab:
        raise DataFormatError(f"trigger token {trigger_token!r} is not in the vocabulary")
    t_id = vocab.index(trigger_token)

    rng = np.random.default_rng(seed)
    params = {tname: _init(rng, tname, shape, config, 1.0)
              for tname, shape in sorted(expected_shapes(config).items())}
    params["embed.W_E"] = np.eye(V, d)
    params["embed.W_pos"] = np.zeros((config.max_seq, d))
    _zero_sublayers(params, config)

    w = rng.normal(0.0, 1.0 / np.sqrt(d), (config.n_objectives, d))
    if head_orthogonal_to_embeddings:
        w[:, :V] = 0.0
    params["head.W"] = w
    w_r = to_float32_exact(w).mean(axis=0)

    u = w_r / np.linalg.norm(w_r) if direction is None else np.asarray(direction, dtype=np.float64)
    if u.shape != (d,) or np.linalg.norm(u) == 0.0:
        raise ShapeMismatchError("plant direction must be a nonzero vector of length d_model")

    p = f"blocks.{layer}."
    if component == "mlp":
        W_in = params[p + "mlp.W_in"]
        W_in[:, 0] = 0.0
        W_in[t_id, 0] = 1.0
        params[p + "mlp.b_in"][0] = -0.5
        W_out = np.zeros((config.d_mlp, d))
        W_out[0] = to_float32_exact(2.0 * gain * u)
        params[p + "mlp.W_out"] = W_out
        write = 0.5 * W_out[0]
    else:
        params[p + "attn.W_Q"] = np.zeros((d, d))
        params[p + "attn.W_K"] = np.zeros((d, d))
        W_V = np.zeros((d, d))
        W_V[t_id, 0] = 1.0
        params[p + "attn.W_V"] = W_V
        W_O = np.zeros((d, d))
        W_O[0] = to_float32_exact(gain * u)
        params[p + "attn.W_O"] = W_O
        write = W_O[0].copy()

    params = {k: to_float32_exact(v) for k, v in params.items()}
    model = RewardModel(config, params, vocab, f"planted-{component}-L{layer}")
    model.plant = PlantedCircuit(layer=layer, component=component, trigger_token=trigger_token,
                                 trigger_id=t_id, gain=float(gain), direction=u, write=write)
    return model


def build_length_model(config: TransformerConfig, gain: float = 1.0, seed: int = 0,
                       vocab=None) -> RewardModel:
    """Model whose reward grows linearly with the token count.

    Every sublayer is zeroed and position t carries ``gain * (t + 1)`` along the
    reward direction, so reward ~= b_r + gain * n_tokens (token embeddings are
    projected off the reward direction before float32 rounding).
    """
    config = _sparse_config(config)
    d = config.d_model
    rng = np.random.default_rng(seed)
    params = {tname: _init(rng, tname, shape, config, 1.0)
              for tname, shape in sorted(expected_shapes(config).items())}
    _zero_sublayers(params, config)
    w_r = to_float32_exact(params["head.W"]).mean(axis=0)
    E = params["embed.W_E"]
    params["embed.W_E"] = E - np.outer(E @ w_r, w_r) / (w_r @ w_r)
    steps = gain * np.arange(1, config.max_seq + 1, dtype=np.float64)
    params["embed.W_pos"] = np.outer(steps, w_r / (w_r @ w_r))
    params = {k: to_float32_exact(v) for k, v in params.items()}
    vocab = default_vocab(config.vocab_size) if vocab is None else tuple(vocab)
    return RewardModel(config, params, vocab, f"length-{gain:g}")
