"""Time-frequency block-recurrent transformer (TF-BRT) velocity regressor.

Layout of one window pass::

    X -> input projection (time + DCT branch) -> block-recurrent attention
      -> depth x [convolution, multi-head attention, feedforward] -> output projection

The block-recurrent layer carries an ``L x D_h`` state from one window to the
next through LSTM-style gates. All learned arrays live in a flat, name-keyed
dictionary of :class:`~inertrack.tensor.Tensor` objects.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from . import tensor as T
from .errors import CheckpointError, SequenceTooShortError, ShapeError
from .ingest import SequenceRecord
from .preprocess import N_CHANNELS, DataConfig, NormalizationStats, SegmentSample, channel_names, feature_streams
from .tensor import Tensor
from .validators import validate_non_negative, validate_odd, validate_positive_int, validate_rate

logger = logging.getLogger(__name__)

# magnetometer channels removed by the no-magnetometer variant
MAG_CHANNELS = slice(6, 9)
FF_EXPANSION = 4


@dataclass
class ModelConfig:
    window_length: int = 200
    d_hidden: int = 128
    n_heads: int = 4
    kernel_size: int = 5
    depth: int = 2
    dropout: float = 0.1
    rpe_radius: int = 16
    use_magnetometer: bool = True
    frequency_input: bool = True
    block_recurrent: bool = True
    mag_feature: str = "derivative"

    def __post_init__(self) -> None:
        validate_positive_int(self.window_length, "window_length")
        validate_positive_int(self.d_hidden, "d_hidden")
        validate_positive_int(self.n_heads, "n_heads")
        validate_odd(self.kernel_size, "kernel_size")
        validate_positive_int(self.depth, "depth")
        validate_rate(self.dropout, "dropout")
        validate_non_negative(self.rpe_radius, "rpe_radius")
        if self.d_hidden % self.n_heads != 0:
            raise ValueError(f"d_hidden ({self.d_hidden}) must be divisible by n_heads ({self.n_heads})")
        channel_names(self.mag_feature)

    @property
    def input_dim(self) -> int:
        return N_CHANNELS if self.use_magnetometer else N_CHANNELS - 3

    @property
    def head_dim(self) -> int:
        return self.d_hidden // self.n_heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelConfig":
        known = {item.name for item in fields(cls)}
        return cls(**{key: value for key, value in payload.items() if key in known})


ModelParams = Dict[str, Tensor]


class ForwardResult(NamedTuple):
    velocity: Tensor  # (B, S, L, 2), m/s
    state: Tensor  # (B, L, D_h)
    hidden: NDArray[np.float64]  # (B, S, L, D_h), feedforward output before the projection


# ----------------------------------------------------------------------
# Parameter initialisation
# ----------------------------------------------------------------------
def _attention_shapes(prefix: str, d: int) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d), f"{prefix}.wv": (d, d)}


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every learned array for ``config``."""

    d, h, length = config.d_hidden, config.n_heads, config.window_length
    rpe = (h, 2 * config.rpe_radius + 1)
    shapes: Dict[str, Tuple[int, ...]] = {
        "input.time.weight": (config.input_dim, d),
        "input.time.bias": (d,),
        "input.freq.weight": (config.input_dim, d),
        "input.freq.bias": (d,),
        "state0": (length, d),
    }
    if config.block_recurrent:
        for norm in ("br.norm_in", "br.norm_state"):
            shapes[f"{norm}.gain"] = (d,)
            shapes[f"{norm}.bias"] = (d,)
        for path in ("br.out", "br.state"):
            shapes.update(_attention_shapes(f"{path}.cross", d))
            shapes.update(_attention_shapes(f"{path}.self", d))
            shapes[f"{path}.cross.rpe"] = rpe
            shapes[f"{path}.self.rpe"] = rpe
            shapes[f"{path}.proj"] = (2 * d, d)
        shapes.update(
            {
                "br.mlp.w1": (d, FF_EXPANSION * d),
                "br.mlp.b1": (FF_EXPANSION * d,),
                "br.mlp.w2": (FF_EXPANSION * d, d),
                "br.mlp.b2": (d,),
            }
        )
        for gate in ("forget", "input", "candidate"):
            shapes[f"br.gate.{gate}.weight"] = (2 * d, d)
            shapes[f"br.gate.{gate}.bias"] = (d,)
    else:
        shapes.update({"attn.norm.gain": (d,), "attn.norm.bias": (d,)})
        shapes.update(_attention_shapes("attn", d))
        shapes.update({"attn.rpe": rpe, "attn.wo": (d, d)})
    for i in range(config.depth):
        block = f"block{i}"
        for module in ("conv", "mha", "ff"):
            shapes[f"{block}.{module}.norm.gain"] = (d,)
            shapes[f"{block}.{module}.norm.bias"] = (d,)
        shapes[f"{block}.conv.depthwise"] = (config.kernel_size, d)
        shapes[f"{block}.conv.pointwise"] = (d, d)
        shapes.update(_attention_shapes(f"{block}.mha", d))
        shapes[f"{block}.mha.rpe"] = rpe
        shapes[f"{block}.mha.wo"] = (d, d)
        shapes[f"{block}.ff.w1"] = (d, FF_EXPANSION * d)
        shapes[f"{block}.ff.b1"] = (FF_EXPANSION * d,)
        shapes[f"{block}.ff.w2"] = (FF_EXPANSION * d, d)
        shapes[f"{block}.ff.b2"] = (d,)
    shapes["output.weight"] = (d, 2)
    shapes["output.bias"] = (2,)
    return shapes


def _initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> NDArray[np.float64]:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if name == "br.gate.forget.bias":
        return np.ones(shape)  # start by remembering
    if leaf in ("bias", "b1", "b2", "rpe"):
        return np.zeros(shape)
    if name == "state0":
        return rng.normal(0.0, 0.02, shape)
    # fan-in scaling; for the depthwise kernel the fan-in is the kernel size
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(_initial_value(name, shape, rng), requires_grad=True)
        for name, shape in parameter_shapes(config).items()
    }


# ----------------------------------------------------------------------
# Attention
# ----------------------------------------------------------------------
def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, width = x.shape
    x = x.reshape(*lead, length, n_heads, width // n_heads)
    n = x.ndim
    return T.transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = T.transpose(x, list(range(n - 3)) + [n - 2, n - 3, n - 1])
    *lead, length, n_heads, head_dim = x.shape
    return x.reshape(*lead, length, n_heads * head_dim)


def relative_offsets(length: int, radius: int) -> NDArray[np.int64]:
    """Index into a ``2R+1`` bias table for every (query, key) pair."""

    positions = np.arange(length)
    return np.clip(positions[None, :] - positions[:, None], -radius, radius) + radius


def attention(
    queries: Tensor,
    keys_values: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    rpe: Optional[Tensor],
    n_heads: int,
) -> Tuple[Tensor, NDArray[np.float64]]:
    """Multi-head scaled dot-product attention with an optional relative-position bias.

    ``rpe`` is a ``(n_heads, 2R+1)`` table; ``None`` or ``R == 0`` disables the
    bias. Returns the merged output and the attention weights
    ``(..., n_heads, L_q, L_k)``.
    """

    if queries.shape[-1] != wq.shape[0] or keys_values.shape[-1] != wk.shape[0]:
        raise ShapeError("attention", queries.shape, keys_values.shape)
    q = _split_heads(queries @ wq, n_heads)
    k = _split_heads(keys_values @ wk, n_heads)
    v = _split_heads(keys_values @ wv, n_heads)
    logits = (q @ T.transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    if rpe is not None and rpe.shape[-1] > 1:
        radius = (rpe.shape[-1] - 1) // 2
        index = relative_offsets(queries.shape[-2], radius)
        logits = logits + T.take(rpe, index, axis=1)
    weights = T.softmax(logits, axis=-1)
    return _merge_heads(weights @ v), weights.data


class _PassContext:
    """Train flag of one forward pass; hands out ``(seed, step, op_id)`` dropout keys in call order."""

    def __init__(self, train: bool = False, key: Optional[Tuple[int, int]] = None) -> None:
        self.train = train
        self.key = key
        self.op_id = 0

    def next(self) -> Tuple[int, int, int]:
        self.op_id += 1
        seed, step = self.key if self.key is not None else (0, 0)
        return seed, step, self.op_id


# ----------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------
class TFBRT:
    """Parameters plus the forward computation of the network."""

    def __init__(
        self,
        config: ModelConfig,
        params: Optional[ModelParams] = None,
        stats: Optional[NormalizationStats] = None,
        seed: int = 0,
    ) -> None:
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.stats = NormalizationStats.identity() if stats is None else stats
        expected = parameter_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter names do not match the configuration (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name}", self.params[name].shape, shape)
            if not np.all(np.isfinite(self.params[name].data)):
                raise ValueError(f"parameter {name} contains non-finite values")

        # forward passes may run concurrently on shared parameters
        self._local = threading.local()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> ModelParams:
        return self.params

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def n_parameters(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    # ------------------------------------------------------------------
    # Persistence helpers
    # ------------------------------------------------------------------
    def state_arrays(self) -> Dict[str, NDArray[np.float64]]:
        return {name: tensor.data for name, tensor in self.params.items()}

    @classmethod
    def from_arrays(
        cls,
        config: ModelConfig,
        arrays: Dict[str, NDArray[np.float64]],
        stats: NormalizationStats,
        expected: Optional[ModelConfig] = None,
    ) -> "TFBRT":
        if expected is not None and expected != config:
            raise CheckpointError(f"checkpoint was written for {config}, expected {expected}")
        try:
            params = {name: Tensor(np.array(array), requires_grad=True) for name, array in arrays.items()}
            return cls(config, params=params, stats=stats)
        except ValueError as exc:
            raise CheckpointError(f"checkpoint does not match its model configuration: {exc}") from exc

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------
    def _dropout(self, x: Tensor) -> Tensor:
        ctx = getattr(self._local, "ctx", None)
        if ctx is None or not ctx.train:
            return x
        return T.dropout(x, self.config.dropout, True, ctx.next())

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def _rpe(self, name: str) -> Optional[Tensor]:
        return self.params[name] if self.config.rpe_radius > 0 else None

    def _attend(self, prefix: str, queries: Tensor, keys_values: Tensor) -> Tensor:
        p = self.params
        out, _ = attention(
            queries, keys_values, p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"],
            self._rpe(f"{prefix}.rpe"), self.config.n_heads,
        )
        return out

    def input_projection(self, x: Tensor) -> Tensor:
        """``f_t(X) + f_f(DCT(X))`` mapping ``(..., L, D)`` to ``(..., L, D_h)``."""

        x = T.as_tensor(x)
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError("input_projection", x.shape, (self.config.window_length, self.config.input_dim))
        p = self.params
        freq = T.dct2(x) if self.config.frequency_input else x
        time_part = x @ p["input.time.weight"] + p["input.time.bias"]
        return time_part + (freq @ p["input.freq.weight"] + p["input.freq.bias"])

    def br_attention(self, m: Tensor, state: Tensor) -> Tuple[Tensor, Tensor]:
        """Block-recurrent attention: returns the window output and the next state."""

        m, state = T.as_tensor(m), T.as_tensor(state)
        if state.shape[-2:] != m.shape[-2:]:
            raise ShapeError("br_attention state", state.shape, m.shape)
        p = self.params
        e = self._norm(m, "br.norm_in")
        s = self._norm(state, "br.norm_state")

        heads = T.concat([self._attend("br.out.cross", e, s), self._attend("br.out.self", e, e)], axis=-1)
        z = self._dropout(heads @ p["br.out.proj"]) + e
        inner = T.gelu(z @ p["br.mlp.w1"] + p["br.mlp.b1"]) @ p["br.mlp.w2"] + p["br.mlp.b2"]
        out = self._dropout(inner) + z

        mirrored = T.concat([self._attend("br.state.cross", s, e), self._attend("br.state.self", s, s)], axis=-1)
        attended = mirrored @ p["br.state.proj"]
        gate_in = T.concat([attended, state], axis=-1)
        forget = T.sigmoid(gate_in @ p["br.gate.forget.weight"] + p["br.gate.forget.bias"])
        write = T.sigmoid(gate_in @ p["br.gate.input.weight"] + p["br.gate.input.bias"])
        candidate = T.tanh(gate_in @ p["br.gate.candidate.weight"] + p["br.gate.candidate.bias"])
        return out, forget * state + write * candidate

    def plain_attention(self, m: Tensor) -> Tensor:
        """Pre-norm self-attention used when the block-recurrent layer is disabled."""

        x = self._norm(m, "attn.norm")
        return m + self._dropout(self._attend("attn", x, x) @ self.params["attn.wo"])

    def conv_module(self, x: Tensor, block: int) -> Tensor:
        prefix = f"block{block}.conv"
        p = self.params
        y = T.depthwise_conv1d(self._norm(x, f"{prefix}.norm"), p[f"{prefix}.depthwise"])
        return x + self._dropout(T.pointwise_conv1d(y, p[f"{prefix}.pointwise"]))

    def mha_module(self, x: Tensor, block: int) -> Tensor:
        prefix = f"block{block}.mha"
        y = self._norm(x, f"{prefix}.norm")
        return x + self._dropout(self._attend(prefix, y, y) @ self.params[f"{prefix}.wo"])

    def ff_module(self, x: Tensor, block: int) -> Tensor:
        prefix = f"block{block}.ff"
        p = self.params
        y = T.gelu(self._norm(x, f"{prefix}.norm") @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return x + self._dropout(y @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])

    def output_projection(self, x: Tensor) -> Tensor:
        """Per-step affine map ``D_h -> 2``, de-normalized to m/s."""

        y = x @ self.params["output.weight"] + self.params["output.bias"]
        return y * self.stats.vel_scale

    def init_state(self) -> Tensor:
        return self.params["state0"]

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------
    def _window(self, x: Tensor, state: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        m = self.input_projection(x)
        if self.config.block_recurrent:
            h, state = self.br_attention(m, state)
        else:
            h = self.plain_attention(m)
        for block in range(self.config.depth):
            h = self.conv_module(h, block)
            h = self.mha_module(h, block)
            h = self.ff_module(h, block)
        return self.output_projection(h), state, h

    def normalize(self, features: NDArray[np.float64]) -> NDArray[np.float64]:
        x = self.stats.apply(features)
        if not self.config.use_magnetometer:
            x = np.delete(x, np.arange(N_CHANNELS)[MAG_CHANNELS], axis=-1)
        return x

    def forward(
        self,
        features: Union[NDArray[np.float64], SegmentSample],
        state: Optional[Tensor] = None,
        train: bool = False,
        dropout_key: Optional[Tuple[int, int]] = None,
    ) -> ForwardResult:
        """Run ``S`` adjacent windows, threading the recurrent state through them.

        ``features`` holds raw (un-normalized) heading-agnostic features of shape
        ``(B, S, L, 9)``; a :class:`SegmentSample` is treated as a batch of one.
        ``state`` defaults to the trainable initial state.
        """

        if isinstance(features, SegmentSample):
            features = features.features[None]
        features = np.asarray(features, dtype=np.float64)
        length = self.config.window_length
        if features.ndim != 4 or features.shape[2:] != (length, N_CHANNELS):
            raise ShapeError("forward", features.shape, ("B", "S", length, N_CHANNELS))
        batch, n_windows = features.shape[:2]
        x_all = self.normalize(features)

        if state is None:
            state = T.add(np.zeros((batch, length, self.config.d_hidden)), self.init_state())
        elif state.shape != (batch, length, self.config.d_hidden):
            raise ShapeError("forward state", state.shape, (batch, length, self.config.d_hidden))

        self._local.ctx = _PassContext(train, dropout_key)
        velocities, hidden = [], []
        try:
            for s in range(n_windows):
                velocity, state, h = self._window(Tensor(np.ascontiguousarray(x_all[:, s])), state)
                velocities.append(velocity)
                hidden.append(h.data)
        finally:
            self._local.ctx = None
        return ForwardResult(T.stack(velocities, axis=1), state, np.stack(hidden, axis=1))

    def predict_sequence(
        self,
        record: SequenceRecord,
        data_config: Optional[DataConfig] = None,
    ) -> NDArray[np.float64]:
        """Streaming inference over a whole sequence.

        Non-overlapping windows of ``L`` samples are fed one at a time with the
        state carried across the whole sequence. Returns planar velocity for the
        first ``floor(N / L) * L`` samples.
        """

        if data_config is None:
            data_config = DataConfig(window_length=self.config.window_length, mag_feature=self.config.mag_feature)
        if data_config.mag_feature != self.config.mag_feature:
            raise ValueError(
                f"model was built for mag_feature '{self.config.mag_feature}', "
                f"features use '{data_config.mag_feature}'"
            )
        length = self.config.window_length
        n_windows = len(record) // length
        if n_windows == 0:
            raise SequenceTooShortError(f"tracking {record.id}", length, len(record))
        features, _ = feature_streams(
            record,
            cutoff_hz=data_config.mag_cutoff_hz,
            stride=data_config.velocity_stride,
            mag_feature=data_config.mag_feature,
        )
        windows = features[: n_windows * length].reshape(1, n_windows, length, N_CHANNELS)
        state: Optional[Tensor] = None
        velocities = []
        for s in range(n_windows):
            result = self.forward(windows[:, s:s + 1], state=state)
            velocities.append(result.velocity.data[0, 0])
            state = result.state
        logger.debug("predicted %d windows for %s", n_windows, record.id)
        return np.concatenate(velocities)

    def hidden_features(self, segments: Iterable[SegmentSample]) -> List[NDArray[np.float64]]:
        """Per-segment hidden sequences ``(S, L, D_h)`` from an eval-mode pass."""

        return [self.forward(segment).hidden[0] for segment in segments]
