"""Stacked conditional layers, pooling and a dense classifier head.

A model consumes segments of ``q = 2 * sum(orders) + k`` frames.  Each
conditional layer of order ``n`` removes ``2n`` frames, so exactly ``k`` frames
reach the temporal pool.  The pooled vector passes through PReLU dense layers
(with dropout while training) and a softmax output layer.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .data import Pipeline, Standardizer
from .masking import BinaryMask, MaskSpec, generate_mask
from .numkernel import Rng

MAGIC = b"MCLNN01\x00"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


def segment_width(orders, k: int) -> int:
    orders = list(orders)
    if not orders:
        raise ConfigError("at least one conditional layer is required")
    if any(n < 1 for n in orders):
        raise ConfigError(f"every order must be >= 1, got {orders}")
    if k < 1:
        raise ConfigError(f"extra frames k must be >= 1, got {k}")
    return 2 * sum(orders) + k


@dataclass(frozen=True)
class SegmentGeometry:
    orders: tuple[int, ...]
    k: int

    @property
    def m(self) -> int:
        return len(self.orders)

    @property
    def q(self) -> int:
        return segment_width(self.orders, self.k)


@dataclass
class LayerConfig:
    width: int
    order: int
    mask: dict | None = None  # {"bandwidth": int, "overlap": int}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        unknown = set(d) - {"width", "order", "mask"}
        if unknown:
            raise ConfigError(f"unknown layer keys: {sorted(unknown)}")
        mask = d.get("mask")
        if mask is not None:
            extra = set(mask) - {"bandwidth", "overlap"}
            if extra or len(mask) != 2:
                raise ConfigError(f"mask needs exactly 'bandwidth' and 'overlap', got {sorted(mask)}")
            mask = {"bandwidth": int(mask["bandwidth"]), "overlap": int(mask["overlap"])}
        return cls(int(d["width"]), int(d["order"]), mask)


@dataclass
class ModelConfig:
    input_features: int
    layers: list[LayerConfig]
    extra_frames: int
    classes: int
    pool: str = "mean"
    dense_widths: list[int] = field(default_factory=lambda: [100, 100])
    dropout: list[float] | None = None  # per dense layer, default 0.5 each
    transfer: str = "prelu"
    seed: int = 0

    def __post_init__(self):
        self.layers = [lc if isinstance(lc, LayerConfig) else LayerConfig.from_dict(lc) for lc in self.layers]
        if self.dropout is None:
            self.dropout = [0.5] * len(self.dense_widths)
        self.validate()

    def validate(self) -> None:
        if self.input_features < 1:
            raise ConfigError("input_features must be >= 1")
        if not self.layers:
            raise ConfigError("at least one conditional layer is required")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.pool not in L.POOL_MODES:
            raise ConfigError(f"pool must be one of {L.POOL_MODES}, got {self.pool!r}")
        if self.transfer not in ("prelu", "identity"):
            raise ConfigError(f"transfer must be 'prelu' or 'identity', got {self.transfer!r}")
        if len(self.dropout) != len(self.dense_widths):
            raise ConfigError("dropout needs one rate per dense layer")
        for r in self.dropout:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {r}")
        if any(w < 1 for w in self.dense_widths) or any(lc.width < 1 for lc in self.layers):
            raise ConfigError("layer widths must be >= 1")
        segment_width([lc.order for lc in self.layers], self.extra_frames)
        features = self.input_features
        for lc in self.layers:
            if lc.mask is not None:
                MaskSpec(features, lc.width, lc.mask["bandwidth"], lc.mask["overlap"])
            features = lc.width

    @property
    def geometry(self) -> SegmentGeometry:
        return SegmentGeometry(tuple(lc.order for lc in self.layers), self.extra_frames)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"input_features", "layers", "extra_frames", "classes"} - set(d)
        if missing:
            raise ConfigError(f"model config is missing {sorted(missing)}")
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    conditional: list[L.ConditionalParams]
    dense: list[L.DenseParams]
    output: L.DenseParams
    pipeline: Pipeline = field(default_factory=Pipeline)

    @property
    def geometry(self) -> SegmentGeometry:
        return self.config.geometry

    def parameters(self) -> dict[str, np.ndarray]:
        """Named references to every trainable array, in a fixed order."""
        out = {}
        for i, p in enumerate(self.conditional):
            out[f"cond{i}.weights"] = p.weights
            out[f"cond{i}.bias"] = p.bias
            if p.slope is not None:
                out[f"cond{i}.slope"] = p.slope
        for i, p in enumerate(self.dense):
            out[f"dense{i}.weights"] = p.weights
            out[f"dense{i}.bias"] = p.bias
            if p.slope is not None:
                out[f"dense{i}.slope"] = p.slope
        out["output.weights"] = self.output.weights
        out["output.bias"] = self.output.bias
        return out

    def masks(self) -> dict[str, np.ndarray]:
        """Parameter name -> 0/1 array broadcastable to that parameter."""
        return {f"cond{i}.weights": p.mask.matrix for i, p in enumerate(self.conditional) if p.mask is not None}

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(values) != set(own):
            raise KeyError(f"parameter names differ: {sorted(set(values) ^ set(own))}")
        for name, v in values.items():
            if own[name].shape != np.shape(v):
                raise ValueError(f"{name}: shape {np.shape(v)} != {own[name].shape}")
            own[name][...] = v

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def predict_proba(self, segments: np.ndarray) -> np.ndarray:
        return model_forward(self, segments, training=False)


def build_model(config: ModelConfig, rng: Rng | None = None, pipeline: Pipeline | None = None) -> Model:
    rng = rng if rng is not None else Rng(config.seed)
    prelu = config.transfer == "prelu"
    conditional = []
    features = config.input_features
    for lc in config.layers:
        mask = None
        if lc.mask is not None:
            mask = generate_mask(MaskSpec(features, lc.width, lc.mask["bandwidth"], lc.mask["overlap"]))
        conditional.append(L.ConditionalParams.init(rng, features, lc.width, lc.order, mask, prelu))
        features = lc.width
    pooled = features * config.extra_frames if config.pool == "flatten" else features
    dense = []
    for width in config.dense_widths:
        dense.append(L.DenseParams.init(rng, pooled, width, prelu))
        pooled = width
    output = L.DenseParams.init(rng, pooled, config.classes, prelu=False)
    return Model(config, conditional, dense, output, pipeline or Pipeline())


# -- forward / backward --------------------------------------------------------------

def _check_segments(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    q = model.geometry.q
    if x.ndim not in (2, 3):
        raise L.GeometryError(f"segments must be (features, q) or (batch, features, q), got {x.shape}")
    if x.shape[-1] != q:
        raise L.GeometryError(f"segment has {x.shape[-1]} frames, model expects q={q}")
    if x.shape[-2] != model.config.input_features:
        raise L.GeometryError(
            f"segment has {x.shape[-2]} features, model expects {model.config.input_features}")
    return x


def _forward(model: Model, x: np.ndarray, training: bool, rng: Rng | None):
    caches = {"cond": [], "dense": [], "drop": []}
    h = x
    for p in model.conditional:
        h, c = L.conditional_forward(h, p)
        caches["cond"].append(c)
    caches["pool_input_frames"] = h.shape[-1]
    h, caches["pool"] = L.temporal_pool(h, model.config.pool)
    for p, rate in zip(model.dense, model.config.dropout):
        h, c = L.dense_forward(h, p)
        caches["dense"].append(c)
        h, keep = L.dropout(h, rate, rng, training)
        caches["drop"].append(keep)
    logits, caches["output"] = L.dense_forward(h, model.output)
    return L.softmax(logits), caches


def model_forward(model: Model, segments, training: bool = False, rng: Rng | None = None) -> np.ndarray:
    """Class probabilities for one segment (features, q) or a batch (B, features, q)."""
    x = _check_segments(model, segments)
    return _forward(model, x, training, rng)[0]


def pool_input_frames(model: Model, segments) -> int:
    """Frame count that reaches the temporal pool for these segments."""
    x = _check_segments(model, segments)
    return _forward(model, x, False, None)[1]["pool_input_frames"]


def cross_entropy(probs: np.ndarray, target) -> np.ndarray | float:
    """``-log p[target]`` with p clamped below at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    classes = probs.shape[-1]
    t = np.asarray(target)
    if np.any(t < 0) or np.any(t >= classes):
        raise ValueError(f"target class out of range [0, {classes})")
    p = np.take_along_axis(probs, t.reshape(probs.shape[:-1] + (1,)).astype(np.int64), axis=-1)[..., 0]
    loss = -np.log(np.maximum(p, 1e-12))
    return float(loss) if loss.ndim == 0 else loss


def model_backward(model: Model, segments, targets, training: bool = False, rng: Rng | None = None):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``Model.parameters()``.
    """
    x = _check_segments(model, segments)
    single = x.ndim == 2
    if single:
        x = x[None]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape != (x.shape[0],):
        raise ValueError(f"need one target per segment, got {targets.shape} for {x.shape[0]} segments")
    if np.any(targets < 0) or np.any(targets >= model.config.classes):
        raise ValueError(f"target class out of range [0, {model.config.classes})")
    probs, caches = _forward(model, x, training, rng)
    batch = x.shape[0]
    loss = float(np.mean(cross_entropy(probs, targets)))

    grads = {}
    g = probs.copy()
    g[np.arange(batch), targets] -= 1.0
    g /= batch
    og = L.dense_backward(model.output, caches["output"], g)
    grads["output.weights"], grads["output.bias"] = og["weights"], og["bias"]
    g = og["input"]
    for i in reversed(range(len(model.dense))):
        g = L.dropout_backward(caches["drop"][i], g)
        dg = L.dense_backward(model.dense[i], caches["dense"][i], g)
        for key in ("weights", "bias", "slope"):
            if key in dg:
                grads[f"dense{i}.{key}"] = dg[key]
        g = dg["input"]
    g = L.temporal_pool_backward(caches["pool"], g)
    for i in reversed(range(len(model.conditional))):
        cg = L.conditional_backward(model.conditional[i], caches["cond"][i], g)
        for key in ("weights", "bias", "slope"):
            if key in cg:
                grads[f"cond{i}.{key}"] = cg[key]
        g = cg["input"]
    order = list(model.parameters())
    return loss, {k: grads[k] for k in order}


# -- serialisation ---------------------------------------------------------------------

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    encoded = name.encode()
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.ravel(order="F").astype("<f8").tobytes()


def model_to_bytes(model: Model) -> bytes:
    tensors = dict(model.parameters())
    st = model.pipeline.standardizer
    if st is not None:
        tensors["pipeline.mean"] = st.mean
        tensors["pipeline.std"] = st.std
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "pipeline": {"use_delta": model.pipeline.use_delta,
                     "std_epsilon": st.epsilon if st is not None else None},
        "tensors": list(tensors),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + struct.pack("<I", len(tensors))
    body += b"".join(_pack_tensor(n, a) for n, a in tensors.items())
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFileError("model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(buf: bytes) -> Model:
    if not buf.startswith(MAGIC):
        raise ModelFileError("not a model file (bad magic header)")
    if len(buf) < len(MAGIC) + 8:
        raise ModelFileError("model file is truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ModelFileError("model file is corrupt (checksum mismatch)")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError:
        raise ModelFileError("model file header is not valid JSON") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported model format version {header.get('format_version')} (expected {FORMAT_VERSION})")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape, order="F")
    if r.pos != len(r.buf):
        raise ModelFileError("model file has trailing bytes")

    config = ModelConfig.from_dict(header["config"])
    pipe = header["pipeline"]
    standardizer = None
    if "pipeline.mean" in tensors:
        standardizer = Standardizer(tensors.pop("pipeline.mean"), tensors.pop("pipeline.std"),
                                    pipe["std_epsilon"])
    model = build_model(config, Rng(0), Pipeline(pipe["use_delta"], standardizer))
    try:
        model.set_parameters(tensors)
    except (KeyError, ValueError) as exc:
        raise ModelFileError(f"model tensors do not match config: {exc}") from None
    return model


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def masked_equivalent(model: Model) -> Model:
    """Copy with every mask folded into its weights and replaced by all-ones."""
    clone = model_from_bytes(model_to_bytes(model))
    for p in clone.conditional:
        if p.mask is not None:
            p.weights[...] = p.weights * p.mask.matrix
            p.mask = BinaryMask(np.ones_like(p.mask.matrix), None)
    return clone
