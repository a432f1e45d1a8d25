"""TopK sparse autoencoder over final-token residual activations.

Encoder ``z = (x - b_dec) W_enc + b_enc``; the k largest entries of ``z`` are
kept (ties to the lower index), then ReLU; decoder ``x_hat = f W_dec + b_dec``
where the rows of ``W_dec`` are the feature directions. Loss is
``mean_batch |x - x_hat|^2 + 0.01 * sum_i (|d_i| - 1)^2``, optimised with Adam
under a cosine learning-rate schedule; decoder rows are renormalised after every
step.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .engine import RewardModel
from .errors import CorruptBlobError, DataFormatError, ShapeMismatchError, TrainingDivergedError
from .tensorfile import atomic_write_bytes, read_tensors, write_tensors

log = logging.getLogger(__name__)

SHARD_MAGIC = b"RLSH1"
_HEADER = struct.Struct("<iII")  # layer, count, d
NORM_PENALTY = 0.01
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
_PARAMS = ("W_enc", "b_enc", "W_dec", "b_dec")


# -- shards ----------------------------------------------------------------

@dataclass(frozen=True)
class ActivationShard:
    layer: int
    data: np.ndarray   # (count, d), float64 holding float32 values

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def encode_shard(layer: int, rows: np.ndarray) -> bytes:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return SHARD_MAGIC + _HEADER.pack(layer, rows.shape[0], rows.shape[1]) + rows.astype("<f4").tobytes()


def decode_shard(blob: bytes) -> ActivationShard:
    if not blob.startswith(SHARD_MAGIC):
        raise CorruptBlobError("bad magic: not an activation shard")
    start = len(SHARD_MAGIC)
    if len(blob) < start + _HEADER.size:
        raise CorruptBlobError("truncated shard header")
    layer, count, d = _HEADER.unpack_from(blob, start)
    payload = blob[start + _HEADER.size:]
    if len(payload) != 4 * count * d:
        raise CorruptBlobError(f"shard header says {count}x{d} floats, payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, d)
    return ActivationShard(layer, data)


def read_shard(path) -> ActivationShard:
    return decode_shard(Path(path).read_bytes())


def iter_shards(paths: Iterable) -> Iterator[ActivationShard]:
    for p in paths:
        yield p if isinstance(p, ActivationShard) else read_shard(p)


def load_rows(shards: Iterable) -> np.ndarray:
    blocks = [s.data for s in iter_shards(shards)]
    if not blocks:
        raise DataFormatError("no activation shards given")
    dims = {b.shape[1] for b in blocks}
    if len(dims) != 1:
        raise ShapeMismatchError(f"shards disagree on d: {sorted(dims)}")
    return np.concatenate(blocks, axis=0)


def collect_activations(model: RewardModel, corpus: Sequence[tuple[str, str]], layer: int,
                        out_dir, max_rows: int = 4096) -> list[Path]:
    """Write final-token ``residual[layer]`` rows to shards of at most ``max_rows`` rows."""
    if not -1 <= layer < model.n_layers:
        raise ValueError(f"layer {layer} outside -1..{model.n_layers - 1}")
    if max_rows < 1:
        raise ValueError("max_rows must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [model.forward_with_cache(p, r)[1].residual[layer] for p, r in corpus]
    paths = []
    for i, start in enumerate(range(0, len(rows), max_rows)):
        block = np.array(rows[start:start + max_rows]).reshape(-1, model.d_model)
        path = out_dir / f"layer{layer}_shard{i:04d}.bin"
        atomic_write_bytes(path, encode_shard(layer, block))
        paths.append(path)
    return paths


# -- state -----------------------------------------------------------------

@dataclass
class TopKSAEState:
    W_enc: np.ndarray   # (d, F)
    b_enc: np.ndarray   # (F,)
    W_dec: np.ndarray   # (F, d)
    b_dec: np.ndarray   # (d,)
    k: int
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        d, F = self.W_enc.shape
        if self.b_enc.shape != (F,) or self.W_dec.shape != (F, d) or self.b_dec.shape != (d,):
            raise ShapeMismatchError("inconsistent SAE parameter shapes")
        if not 1 <= self.k <= F:
            raise ValueError(f"k must be in [1, {F}], got {self.k}")
        for name in _PARAMS:
            self.m.setdefault(name, np.zeros_like(getattr(self, name)))
            self.v.setdefault(name, np.zeros_like(getattr(self, name)))

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def n_features(self) -> int:
        return self.W_enc.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in _PARAMS}

    def copy(self) -> "TopKSAEState":
        return TopKSAEState(*(getattr(self, n).copy() for n in _PARAMS), k=self.k, step=self.step,
                            m={n: a.copy() for n, a in self.m.items()},
                            v={n: a.copy() for n, a in self.v.items()})

    def save(self, path) -> None:
        """Write the state (float32-rounded) in the tensor blob format."""
        tensors = dict(self.params())
        tensors.update({f"adam_m.{n}": a for n, a in self.m.items()})
        tensors.update({f"adam_v.{n}": a for n, a in self.v.items()})
        tensors["k"] = np.array(float(self.k))
        tensors["step"] = np.array(float(self.step))
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "TopKSAEState":
        t = read_tensors(path)
        try:
            return cls(t["W_enc"], t["b_enc"], t["W_dec"], t["b_dec"], k=int(t["k"]), step=int(t["step"]),
                       m={n: t[f"adam_m.{n}"] for n in _PARAMS}, v={n: t[f"adam_v.{n}"] for n in _PARAMS})
        except KeyError as exc:
            raise DataFormatError(f"SAE state file is missing tensor {exc}") from None


def init_state(d: int, n_features: int, k: int, seed: int = 0, data: Optional[np.ndarray] = None) -> TopKSAEState:
    """Unit-norm random decoder rows with a tied encoder.

    When ``data`` is given, ``b_dec`` starts at the data mean and the decoder
    rows at randomly chosen centred data rows.
    """
    rng = np.random.default_rng(seed)
    W_dec = rng.normal(size=(n_features, d))
    b_dec = np.zeros(d)
    if data is not None:
        data = np.asarray(data, dtype=np.float64)
        b_dec = data.mean(axis=0)
        centred = data - b_dec
        pick = rng.choice(len(data), size=n_features, replace=len(data) < n_features)
        seeds = centred[pick]
        ok = np.linalg.norm(seeds, axis=1) > 1e-12
        W_dec[ok] = seeds[ok]
    W_dec /= np.linalg.norm(W_dec, axis=1, keepdims=True)
    return TopKSAEState(W_dec.T.copy(), np.zeros(n_features), W_dec, b_dec, k)


# -- forward / loss --------------------------------------------------------

def _topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def encode(state: TopKSAEState, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pre-activations z, active mask, codes f) for a batch."""
    z = (X - state.b_dec) @ state.W_enc + state.b_enc
    mask = _topk_mask(z, state.k) & (z > 0)
    return z, mask, np.where(mask, z, 0.0)


def sae_forward(state: TopKSAEState, x) -> tuple[np.ndarray, np.ndarray]:
    """Codes f (at most k nonzeros) and reconstruction x_hat; accepts a vector or a batch."""
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != state.d:
        raise ShapeMismatchError(f"input has dimension {X.shape[-1]}, SAE expects {state.d}")
    _, _, f = encode(state, np.atleast_2d(X))
    x_hat = f @ state.W_dec + state.b_dec
    if X.ndim == 1:
        return f[0], x_hat[0]
    return f, x_hat


def loss_and_grads(state: TopKSAEState, X: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    xc = X - state.b_dec
    _, mask, f = encode(state, X)
    e = f @ state.W_dec + state.b_dec - X
    norms = np.linalg.norm(state.W_dec, axis=1)
    loss = float((e * e).sum() / B + NORM_PENALTY * ((norms - 1.0) ** 2).sum())

    g = 2.0 * e / B
    dW_dec = f.T @ g
    safe = np.where(norms > 0, norms, 1.0)
    dW_dec += (2.0 * NORM_PENALTY * (norms - 1.0) / safe)[:, None] * state.W_dec
    dz = (g @ state.W_dec.T) * mask
    grads = {
        "W_enc": xc.T @ dz,
        "b_enc": dz.sum(axis=0),
        "W_dec": dW_dec,
        "b_dec": g.sum(axis=0) - dz.sum(axis=0) @ state.W_enc.T,
    }
    return loss, grads


def cosine_lr(lr0: float, t: int, total: int) -> float:
    return 0.5 * lr0 * (1.0 + np.cos(np.pi * t / total))


def renormalise_decoder(state: TopKSAEState) -> None:
    norms = np.linalg.norm(state.W_dec, axis=1, keepdims=True)
    state.W_dec /= np.where(norms > 0, norms, 1.0)


def adam_step(state: TopKSAEState, grads: dict[str, np.ndarray], lr: float) -> None:
    state.step += 1
    t = state.step
    for name in _PARAMS:
        g = grads[name]
        state.m[name] = BETA1 * state.m[name] + (1 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1 - BETA2) * g * g
        m_hat = state.m[name] / (1 - BETA1 ** t)
        v_hat = state.v[name] / (1 - BETA2 ** t)
        getattr(state, name)[...] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    renormalise_decoder(state)


def train(state: TopKSAEState, shards, epochs: int = 1, lr0: float = 1e-3, batch_size: int = 256,
          seed: int = 0) -> tuple[TopKSAEState, list[float]]:
    """Train a copy of ``state``; returns it with the per-step loss trace."""
    X = shards if isinstance(shards, np.ndarray) else load_rows(shards)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != state.d:
        raise ShapeMismatchError(f"activations have d={X.shape[1]}, SAE expects {state.d}")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    state = state.copy()
    rng = np.random.default_rng(seed)
    n_batches = -(-len(X) // batch_size)
    total = epochs * n_batches
    trace, t = [], 0
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for b in range(n_batches):
            batch = X[order[b * batch_size:(b + 1) * batch_size]]
            loss, grads = loss_and_grads(state, batch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss {loss} at step {t} (epoch {epoch}, lr "
                                            f"{cosine_lr(lr0, t, total):.3g})")
            adam_step(state, grads, cosine_lr(lr0, t, total))
            trace.append(loss)
            t += 1
        log.debug("epoch %d loss %.6g", epoch, trace[-1])
    return state, trace


# -- analysis --------------------------------------------------------------

@dataclass(frozen=True)
class FeatureInfo:
    index: int
    reward_alignment: float
    mean_activation: float
    activation_frequency: float
    top_activating_indices: list[int]
    top_activating_values: list[float]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "reward_alignment": self.reward_alignment,
            "mean_activation": self.mean_activation,
            "activation_frequency": self.activation_frequency,
            "top_activating_indices": list(self.top_activating_indices),
            "top_activating_values": list(self.top_activating_values),
        }


def analyze_features(state: TopKSAEState, shards, w_r, m: int = 10) -> list[FeatureInfo]:
    """Per-feature reward alignment ``w_r . d_i`` and activation statistics.

    Row indices count across the shards in the order given. Top lists hold up
    to ``m`` rows where the feature is active, largest first, ties to the lower row.
    """
    X = shards if isinstance(shards, np.ndarray) else load_rows(shards)
    if len(X) == 0:
        raise DataFormatError("no activation rows to analyse")
    w_r = np.asarray(w_r, dtype=np.float64)
    f, _ = sae_forward(state, np.atleast_2d(X))
    align = state.W_dec @ w_r
    out = []
    for i in range(state.n_features):
        col = f[:, i]
        active = np.flatnonzero(col > 0)
        top = active[np.argsort(-col[active], kind="stable")][:m]
        out.append(FeatureInfo(i, float(align[i]), float(col.mean()), len(active) / len(col),
                               [int(j) for j in top], [float(col[j]) for j in top]))
    return out


def top_reward_features(features: Sequence[FeatureInfo], k: int) -> list[FeatureInfo]:
    return sorted(features, key=lambda fi: -abs(fi.reward_alignment))[:k]


@dataclass(frozen=True)
class RewardDecomposition:
    feature_terms: np.ndarray   # f_i * (w_r . d_i)
    decoder_bias_term: float    # w_r . b_dec
    reward_bias: float          # b_r
    error_term: float           # w_r . (x - x_hat)
    total: float                # w_r . x + b_r

    def reconstructed_total(self) -> float:
        return float(self.feature_terms.sum() + self.decoder_bias_term + self.reward_bias + self.error_term)


def decompose_reward_for_input(state: TopKSAEState, x, w_r, b_r: float = 0.0) -> RewardDecomposition:
    x = np.asarray(x, dtype=np.float64)
    w_r = np.asarray(w_r, dtype=np.float64)
    if x.shape != (state.d,) or w_r.shape != (state.d,):
        raise ShapeMismatchError(f"x and w_r must have length {state.d}")
    f, x_hat = sae_forward(state, x)
    return RewardDecomposition(
        feature_terms=f * (state.W_dec @ w_r),
        decoder_bias_term=float(w_r @ state.b_dec),
        reward_bias=float(b_r),
        error_term=float(w_r @ (x - x_hat)),
        total=float(w_r @ x + b_r),
    )
