"""Contrastive training of a toy visual/text encoder pair.

Each training example pairs a start and an end frame from a clip with an
instruction for the clip's task. The visual goal representation is the
difference between the encoded end and start frames; the loss scores
each instruction against every frame-difference in the batch via a
softmax over cosine similarities, pulling matched pairs together.

Gradients are computed analytically (hand-written backprop) and are
checked against central finite differences by finite_difference_check.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .banks import Embedding, Modality
from .errors import (
    DegenerateVectorError,
    DimensionError,
    DivergenceError,
    FormatError,
    IoError,
    ParameterError,
)
from .nets import DenseParams, MomentumState, dense_backward, dense_forward, init_dense, zeros_like_dense

PARAMS_MAGIC = b"EPRM"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Clip:
    """A sequence of observations plus candidate instructions for its task."""

    observations: np.ndarray  # (T, obs_dim), T >= 2
    templates: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[0] < 2:
            raise ParameterError(f"a clip needs at least 2 observations, got shape {obs.shape}")
        object.__setattr__(self, "observations", obs)
        if not self.templates:
            raise ParameterError("a clip needs at least one instruction template")
        for tpl in self.templates:
            if len(tpl) == 0:
                raise ParameterError("instruction templates must be non-empty")


@dataclass(frozen=True)
class PairBatch:
    """B rows of (start frame, end frame, instruction tokens)."""

    o_start: np.ndarray  # (B, obs_dim)
    o_end: np.ndarray  # (B, obs_dim)
    tokens: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        start = np.asarray(self.o_start, dtype=np.float64)
        end = np.asarray(self.o_end, dtype=np.float64)
        if start.ndim != 2 or start.shape != end.shape:
            raise DimensionError(f"frame arrays disagree: {start.shape} vs {end.shape}")
        if start.shape[0] != len(self.tokens):
            raise DimensionError(
                f"{start.shape[0]} frame rows but {len(self.tokens)} instruction rows"
            )
        if start.shape[0] < 1:
            raise ParameterError("a batch needs at least one row")
        for seq in self.tokens:
            if len(seq) == 0:
                raise ParameterError("instruction token sequences must be non-empty")
        object.__setattr__(self, "o_start", start)
        object.__setattr__(self, "o_end", end)

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TrainerConfig:
    obs_dim: int
    vocab_size: int
    dim: int = 16
    visual_hidden: tuple[int, ...] = (64,)
    text_hidden: tuple[int, ...] = (64,)
    token_dim: int = 32
    temperature: float = 1.0
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.3
    momentum: float = 0.9
    seed: int = 0
    freeze_text_after: int | None = None

    def __post_init__(self):
        for name in ("obs_dim", "vocab_size", "dim", "token_dim"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.temperature <= 0.0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.batch_size < 2:
            raise ParameterError("contrastive training needs batch_size >= 2")
        if self.learning_rate <= 0.0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if self.freeze_text_after is not None and self.freeze_text_after < 0:
            raise ParameterError("freeze_text_after must be >= 0 or None")
        object.__setattr__(self, "visual_hidden", tuple(int(h) for h in self.visual_hidden))
        object.__setattr__(self, "text_hidden", tuple(int(h) for h in self.text_hidden))


@dataclass
class EncoderParams:
    """Weights of the visual and text encoders.

    The text encoder embeds tokens via a learned lookup table, mean-pools
    them, and passes the result through its dense layers.
    """

    visual: DenseParams
    text: DenseParams
    token_table: np.ndarray  # (vocab, token_dim)
    temperature: float = 1.0

    @property
    def dim(self) -> int:
        return self.visual.weights[-1].shape[0]

    @property
    def obs_dim(self) -> int:
        return self.visual.weights[0].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.visual.copy(), self.text.copy(), self.token_table.copy(), self.temperature
        )

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order (visual, text, table)."""
        return self.visual.arrays() + self.text.arrays() + [self.token_table]


@dataclass
class EncoderGrads:
    visual: DenseParams
    text: DenseParams
    token_table: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.visual.arrays() + self.text.arrays() + [self.token_table]


def init_encoder_params(config: TrainerConfig, rng: np.random.Generator) -> EncoderParams:
    visual = init_dense([config.obs_dim, *config.visual_hidden, config.dim], rng)
    text = init_dense([config.token_dim, *config.text_hidden, config.dim], rng)
    bound = 1.0 / np.sqrt(config.token_dim)
    table = rng.uniform(-bound, bound, size=(config.vocab_size, config.token_dim))
    return EncoderParams(visual, text, table, config.temperature)


def _pool_tokens(params: EncoderParams, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    pooled = np.empty((len(token_seqs), params.token_table.shape[1]))
    vocab = params.token_table.shape[0]
    for i, seq in enumerate(token_seqs):
        if len(seq) == 0:
            raise ParameterError(f"row {i}: empty token sequence")
        idx = np.asarray(seq, dtype=np.intp)
        if idx.min() < 0 or idx.max() >= vocab:
            raise DimensionError(f"row {i}: token index out of range for vocab {vocab}")
        pooled[i] = params.token_table[idx].mean(axis=0)
    return pooled


def visual_forward(params: EncoderParams, observations: np.ndarray) -> np.ndarray:
    """Encode a batch of observation vectors; (B, obs_dim) -> (B, D)."""
    out, _ = dense_forward(params.visual, np.atleast_2d(np.asarray(observations, dtype=np.float64)))
    return out


def text_forward(params: EncoderParams, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Encode a batch of token sequences; -> (B, D)."""
    out, _ = dense_forward(params.text, _pool_tokens(params, token_seqs))
    return out


def encoder_forward(params: EncoderParams, inp, which: Modality) -> Embedding:
    """Encode one observation vector or one token sequence."""
    if which is Modality.VISUAL:
        return Embedding(visual_forward(params, np.atleast_2d(inp))[0], Modality.VISUAL)
    return Embedding(text_forward(params, [tuple(inp)])[0], Modality.TEXT)


def frame_difference_embedding(params: EncoderParams, o_start, o_end) -> Embedding:
    """Visual goal representation: encode(end frame) - encode(start frame)."""
    pair = np.stack(
        [np.asarray(o_start, dtype=np.float64), np.asarray(o_end, dtype=np.float64)]
    )
    enc = visual_forward(params, pair)
    return Embedding(enc[1] - enc[0], Modality.VISUAL)


def _loss_internals(params: EncoderParams, batch: PairBatch):
    _, cache_start = dense_forward(params.visual, batch.o_start)
    _, cache_end = dense_forward(params.visual, batch.o_end)
    # The output-layer bias cancels in the frame difference; computing the
    # difference before the last matmul keeps that cancellation exact.
    last = params.visual.n_layers - 1
    hidden_diff = cache_end[last] - cache_start[last]
    diff = hidden_diff @ params.visual.weights[last].T  # (B, D)
    pooled = _pool_tokens(params, batch.tokens)
    text, cache_text = dense_forward(params.text, pooled)

    norm_f = np.linalg.norm(diff, axis=1)
    norm_t = np.linalg.norm(text, axis=1)
    if np.any(norm_f == 0.0):
        raise DegenerateVectorError(
            f"frame-difference embedding {int(np.flatnonzero(norm_f == 0.0)[0])} is zero"
        )
    if np.any(norm_t == 0.0):
        raise DegenerateVectorError(
            f"text embedding {int(np.flatnonzero(norm_t == 0.0)[0])} is zero"
        )
    fn = diff / norm_f[:, None]
    tn = text / norm_t[:, None]
    sims = fn @ tn.T  # sims[j, i] = cos(frame-diff j, text i)
    logits = sims / params.temperature
    colmax = logits.max(axis=0)
    exp = np.exp(logits - colmax)
    denom = exp.sum(axis=0)
    lse = colmax + np.log(denom)
    loss = float(np.mean(lse - np.diag(logits)))
    return {
        "loss": loss,
        "softmax": exp / denom,
        "fn": fn,
        "tn": tn,
        "norm_f": norm_f,
        "norm_t": norm_t,
        "hidden_diff": hidden_diff,
        "cache_start": cache_start,
        "cache_end": cache_end,
        "cache_text": cache_text,
    }


def infonce_loss(params: EncoderParams, batch: PairBatch) -> float:
    """Mean over instructions of -log softmax(cos / temperature) mass on
    the matched frame-difference; exactly 0 at batch size 1."""
    return _loss_internals(params, batch)["loss"]


def _gradient_from_internals(params: EncoderParams, batch: PairBatch, state) -> EncoderGrads:
    b = batch.size
    p = state["softmax"]
    dlogits = (p - np.eye(b)) / b
    dsims = dlogits / params.temperature

    fn, tn = state["fn"], state["tn"]
    g_fn = dsims @ tn  # (B, D), gradient on the normalized frame-diffs
    g_tn = dsims.T @ fn
    # through x -> x / ||x||
    ddiff = (g_fn - (np.sum(g_fn * fn, axis=1, keepdims=True)) * fn) / state["norm_f"][:, None]
    dtext = (g_tn - (np.sum(g_tn * tn, axis=1, keepdims=True)) * tn) / state["norm_t"][:, None]

    visual = zeros_like_dense(params.visual)
    last = params.visual.n_layers - 1
    visual.weights[last] = ddiff.T @ state["hidden_diff"]
    # output bias cancelled in the difference, so its gradient stays zero
    if last > 0:
        g = ddiff @ params.visual.weights[last]
        sub = DenseParams(params.visual.weights[:last], params.visual.biases[:last])
        h_end, h_start = state["cache_end"][last], state["cache_start"][last]
        grads_end, _ = dense_backward(sub, state["cache_end"][: last + 1], g * (1.0 - h_end**2))
        grads_start, _ = dense_backward(
            sub, state["cache_start"][: last + 1], -g * (1.0 - h_start**2)
        )
        for l in range(last):
            visual.weights[l] = grads_end.weights[l] + grads_start.weights[l]
            visual.biases[l] = grads_end.biases[l] + grads_start.biases[l]

    text_grads, dpooled = dense_backward(params.text, state["cache_text"], dtext)
    table = np.zeros_like(params.token_table)
    for i, seq in enumerate(batch.tokens):
        share = dpooled[i] / len(seq)
        for tok in seq:
            table[tok] += share
    return EncoderGrads(visual, text_grads, table)


def infonce_gradient(params: EncoderParams, batch: PairBatch) -> EncoderGrads:
    """Analytic gradient of infonce_loss with respect to every parameter."""
    return _gradient_from_internals(params, batch, _loss_internals(params, batch))


def infonce_loss_and_gradient(params: EncoderParams, batch: PairBatch) -> tuple[float, EncoderGrads]:
    state = _loss_internals(params, batch)
    return state["loss"], _gradient_from_internals(params, batch, state)


def finite_difference_check(params: EncoderParams, batch: PairBatch, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, parameter by parameter."""
    if epsilon <= 0.0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    work = params.copy()
    analytic = infonce_gradient(work, batch)
    worst = 0.0
    for arr, grad in zip(work.arrays(), analytic.arrays()):
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            plus = infonce_loss(work, batch)
            flat[i] = saved - epsilon
            minus = infonce_loss(work, batch)
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


@dataclass
class TrainResult:
    params: EncoderParams
    loss_trace: list[float] = field(default_factory=list)


def sample_pair_batch(
    clips: Sequence[Clip], batch_size: int, rng: np.random.Generator
) -> PairBatch:
    """Draw B rows: a random clip, a random start frame n, a random segment
    length m over the valid suffix, and a random instruction template."""
    o_start, o_end, tokens = [], [], []
    for _ in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        horizon = clip.observations.shape[0]
        n = int(rng.integers(0, horizon - 1))
        m = int(rng.integers(1, horizon - n))
        o_start.append(clip.observations[n])
        o_end.append(clip.observations[n + m])
        tokens.append(clip.templates[int(rng.integers(len(clip.templates)))])
    return PairBatch(np.stack(o_start), np.stack(o_end), tuple(tokens))


def train_encoders(clips: Sequence[Clip], config: TrainerConfig) -> TrainResult:
    """Minimize the contrastive objective with seeded SGD + momentum.

    Deterministic per seed; steps=0 returns the seeded initialization.
    """
    clips = list(clips)
    if not clips:
        raise ParameterError("training needs at least one clip")
    for i, clip in enumerate(clips):
        if clip.observations.shape[1] != config.obs_dim:
            raise DimensionError(
                f"clip {i} obs dim {clip.observations.shape[1]} != config {config.obs_dim}"
            )
    rng = np.random.default_rng(config.seed)
    params = init_encoder_params(config, rng)
    arrays = params.arrays()
    optimizer = MomentumState(arrays, config.learning_rate, config.momentum)
    n_visual = len(params.visual.arrays())
    trace: list[float] = []
    for step in range(config.steps):
        batch = sample_pair_batch(clips, config.batch_size, rng)
        loss, grads = infonce_loss_and_gradient(params, batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        trace.append(loss)
        if config.freeze_text_after is not None and step >= config.freeze_text_after:
            mask = [i < n_visual for i in range(len(arrays))]
        else:
            mask = None
        optimizer.step(arrays, grads.arrays(), mask)
    return TrainResult(params, trace)


# ---------------------------------------------------------------------------
# Parameter file: magic "EPRM", u8 version, u32 LE metadata length, JSON
# metadata (shapes, temperature, free-form config echo), then every
# parameter array as LE float32 in declaration order.
# ---------------------------------------------------------------------------


def save_encoder_params(params: EncoderParams, path, extra_metadata: dict | None = None) -> None:
    meta = {
        "visual_sizes": params.visual.sizes,
        "text_sizes": params.text.sizes,
        "token_table_shape": list(params.token_table.shape),
        "temperature": params.temperature,
    }
    if extra_metadata:
        meta["config"] = extra_metadata
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += PARAMS_MAGIC
    buf += struct.pack("<B", PARAMS_VERSION)
    buf += struct.pack("<I", len(blob))
    buf += blob
    for arr in params.arrays():
        buf += arr.astype("<f4").tobytes(order="C")
    try:
        Path(path).write_bytes(bytes(buf))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_encoder_params(path) -> EncoderParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {PARAMS_MAGIC!r}")
    if len(raw) < 9:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<B", raw, 4)
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 5)
    if 9 + meta_len > len(raw):
        raise FormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[9 : 9 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid metadata ({exc})") from exc
    for key in ("visual_sizes", "text_sizes", "token_table_shape", "temperature"):
        if key not in meta:
            raise FormatError(f"{path}: metadata is missing {key!r}")

    offset = 9 + meta_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated payload at offset {offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64)
        offset += 4 * count
        return arr.reshape(shape)

    # Declaration order interleaves each layer's weight and bias.
    visual_sizes = [int(s) for s in meta["visual_sizes"]]
    text_sizes = [int(s) for s in meta["text_sizes"]]
    visual = _take_interleaved(take, visual_sizes)
    text = _take_interleaved(take, text_sizes)
    table = take(tuple(int(s) for s in meta["token_table_shape"]))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return EncoderParams(visual, text, table, float(meta["temperature"]))


def _take_interleaved(take, sizes) -> DenseParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take((fan_out, fan_in)))
        biases.append(take((fan_out,)))
    return DenseParams(weights, biases)
