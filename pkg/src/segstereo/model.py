"""SegStereo-mini and the semantic-free ResCorr-mini baseline.

Dataflow per image pair::

    shallow (3x stride-2 conv) --+--> correlation(left, right) ----------+
                                 +--> 1x1 transform(left) ---------------+--> concat --> encoder --> decoder --> relu(disparity)
                                 +--> segmentation branch(left) ---------+   (only with embed_semantics)
                                 +--> segmentation branch(right) --> right_sem_feat (for the semantic loss)

The shallow extractor and segmentation branch are pretrained on labels and
then frozen; the semantic classifier used by the loss is trainable.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import ConvParams, concat_channels, conv2d, deconv2d
from .stereo import correlation1d
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SSMINI01"


@dataclass
class ModelConfig:
    shallow_channels: int = 32
    transform_channels: int = 64
    sem_channels: int = 64
    max_disp: int = 24
    encoder_blocks: int = 6
    encoder_channels: int = 64
    decoder_blocks: int = 3
    decoder_channels: tuple = (32, 16, 16)
    num_classes: int = 4
    embed_semantics: bool = True
    mini_scale: bool = True
    init_disparity: float = 1.0
    input_scale: float = 1.0 / 64.0

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        positive = ("shallow_channels", "transform_channels", "sem_channels", "encoder_blocks",
                    "encoder_channels", "decoder_blocks", "num_classes")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_disp < 0:
            raise ValueError("max_disp must be >= 0")
        if self.decoder_blocks != 3:
            # three stride-2 deconvs are what bring 1/8 features back to full size
            raise ValueError("decoder_blocks must be 3 to undo the 1/8 downsampling")
        if len(self.decoder_channels) != self.decoder_blocks:
            raise ValueError("decoder_channels needs one width per decoder block")

    @property
    def cost_channels(self) -> int:
        return self.max_disp + 1

    @property
    def hybrid_channels(self) -> int:
        width = self.cost_channels + self.transform_channels
        return width + self.sem_channels if self.embed_semantics else width

    def dilation(self, block: int) -> int:
        # last third of the encoder uses dilated convolutions
        return 2 if block >= self.encoder_blocks - self.encoder_blocks // 3 else 1


# name -> (stride, pad, dilation, transposed)
_Geometry = tuple[int, int, int, bool]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    geometry: dict[str, _Geometry]
    frozen: set[str] = field(default_factory=set)

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def tensors(self, requires_grad=()) -> dict[str, Tensor]:
        wanted = set(requires_grad)
        return {k: Tensor._wrap(v, k in wanted) for k, v in self.params.items()}

    def num_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()},
                          dict(self.geometry), set(self.frozen))


@dataclass
class ModelOutput:
    disparity: Tensor
    left_sem_logits: Tensor
    right_sem_feat: Tensor
    cost_volume: Tensor
    hybrid: Tensor

    def __iter__(self):
        return iter((self.disparity, self.left_sem_logits, self.right_sem_feat))


SHALLOW = "shallow."
SEGMENTATION = "seg."


def _layers(cfg: ModelConfig):
    """Yield ``(name, in_ch, out_ch, k, stride, pad, dilation, transposed)``."""
    s = cfg.shallow_channels
    widths = [3, max(s // 2, 1), s, s]
    for i in range(3):
        yield f"shallow.{i}", widths[i], widths[i + 1], 3, 2, 1, 1, False
    yield "seg.0", s, cfg.sem_channels, 3, 1, 1, 1, False
    yield "seg.1", cfg.sem_channels, cfg.sem_channels, 3, 1, 1, 1, False
    yield "seg.head", cfg.sem_channels, cfg.num_classes, 1, 1, 0, 1, False
    yield "transform", s, cfg.transform_channels, 1, 1, 0, 1, False
    e = cfg.encoder_channels
    for b in range(cfg.encoder_blocks):
        cin = cfg.hybrid_channels if b == 0 else e
        dil = cfg.dilation(b)
        yield f"enc.{b}.conv1", cin, e, 3, 1, dil, dil, False
        yield f"enc.{b}.conv2", e, e, 3, 1, dil, dil, False
        if b == 0:
            yield "enc.0.skip", cin, e, 1, 1, 0, 1, False
    cin = e
    for i, cout in enumerate(cfg.decoder_channels):
        yield f"dec.{i}", cin, cout, 4, 2, 1, 1, True
        cin = cout
    yield "regress", cin, 1, 3, 1, 1, 1, False
    yield "classifier", cfg.sem_channels, cfg.num_classes, 1, 1, 0, 1, False


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Deterministic He-uniform initialisation from ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    geometry: dict[str, _Geometry] = {}
    for name, cin, cout, k, stride, pad, dil, transposed in _layers(config):
        fan_in = cin * k * k
        if transposed:
            fan_in //= stride * stride
        bound = np.sqrt(6.0 / fan_in)
        if name.endswith("conv2"):
            bound *= 0.1  # residual branches start close to identity
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        params[name + ".w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name + ".b"] = np.zeros(cout, dtype=dtype)
        geometry[name] = (stride, pad, dil, transposed)
    params["regress.b"][:] = config.init_disparity
    # the loss classifier starts as a copy of the segmentation head
    params["classifier.w"] = params["seg.head.w"].copy()
    params["classifier.b"] = params["seg.head.b"].copy()
    frozen = {k for k in params if k.startswith((SHALLOW, SEGMENTATION))}
    return ModelState(config, params, geometry, frozen)


def _conv(p: dict[str, Tensor], geometry, name: str, x: Tensor) -> Tensor:
    stride, pad, dil, transposed = geometry[name]
    cp = ConvParams(p[name + ".w"], p[name + ".b"], stride, pad, dil)
    return deconv2d(x, cp) if transposed else conv2d(x, cp)


def classifier_params(state: ModelState, p: dict[str, Tensor] | None = None) -> ConvParams:
    p = p if p is not None else state.tensors()
    return ConvParams(p["classifier.w"], p["classifier.b"])


def prepare_images(images: np.ndarray, config: ModelConfig, dtype=np.float32) -> Tensor:
    """Map 0-255 images ``[N, 3, H, W]`` to centred network input."""
    x = (np.asarray(images, dtype=np.float64) - 127.5) * config.input_scale
    return Tensor._wrap(x.astype(dtype), False)


def shallow_features(state: ModelState, p: dict[str, Tensor], x: Tensor) -> Tensor:
    for i in range(3):
        x = T.relu(_conv(p, state.geometry, f"shallow.{i}", x))
    return x


def semantic_features(state: ModelState, p: dict[str, Tensor], feat: Tensor) -> Tensor:
    x = T.relu(_conv(p, state.geometry, "seg.0", feat))
    return T.relu(_conv(p, state.geometry, "seg.1", x))


def segment(state: ModelState, images: np.ndarray, p: dict[str, Tensor] | None = None) -> Tensor:
    """Segmentation logits at 1/8 resolution for raw 0-255 images."""
    p = p if p is not None else state.tensors()
    x = prepare_images(images, state.config, state.params["shallow.0.w"].dtype)
    sem = semantic_features(state, p, shallow_features(state, p, x))
    return _conv(p, state.geometry, "seg.head", sem)


def forward(state: ModelState, left: np.ndarray | Tensor, right: np.ndarray | Tensor,
            p: dict[str, Tensor] | None = None) -> ModelOutput:
    """Run the network on 0-255 image batches ``[N, 3, H, W]`` (H, W divisible by 8)."""
    cfg = state.config
    p = p if p is not None else state.tensors()
    left = left.data if isinstance(left, Tensor) else np.asarray(left)
    right = right.data if isinstance(right, Tensor) else np.asarray(right)
    if left.ndim == 3:
        left, right = left[None], right[None]
    if left.shape != right.shape or left.ndim != 4 or left.shape[1] != 3:
        raise ValueError(f"expected matching [N,3,H,W] images, got {left.shape} and {right.shape}")
    h, w = left.shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"image extents {h}x{w} must be divisible by 8")
    dtype = state.params["shallow.0.w"].dtype
    g = state.geometry
    fl = shallow_features(state, p, prepare_images(left, cfg, dtype))
    fr = shallow_features(state, p, prepare_images(right, cfg, dtype))

    cost = correlation1d(fl, fr, cfg.max_disp, pad=cfg.max_disp)
    trans = T.relu(_conv(p, g, "transform", fl))
    sem_l = semantic_features(state, p, fl)
    sem_r = semantic_features(state, p, fr)
    logits_l = _conv(p, g, "seg.head", sem_l)
    parts = [cost, trans, sem_l] if cfg.embed_semantics else [cost, trans]
    hybrid = concat_channels(parts)

    x = hybrid
    for b in range(cfg.encoder_blocks):
        y = T.relu(_conv(p, g, f"enc.{b}.conv1", x))
        y = _conv(p, g, f"enc.{b}.conv2", y)
        skip = _conv(p, g, "enc.0.skip", x) if b == 0 else x
        x = T.relu(T.add(skip, y))
    for i in range(cfg.decoder_blocks):
        x = T.relu(_conv(p, g, f"dec.{i}", x))
    disp = T.relu(_conv(p, g, "regress", x))
    return ModelOutput(disp, logits_l, sem_r, cost, hybrid)


# ---------------------------------------------------------------------------
# checkpoint file: magic, then records of
#   u32 name length | name (utf-8) | u32 rank | u32 extents... | float32 LE data

def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            a = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise ValueError("truncated record")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def config_arrays(config: ModelConfig) -> dict[str, np.ndarray]:
    """Encode the integer/bool config fields as float records (all exact in float32)."""
    out = {}
    for k, v in asdict(config).items():
        if isinstance(v, tuple):
            out["config." + k] = np.asarray(v, dtype=np.float32)
        else:
            out["config." + k] = np.asarray([float(v)], dtype=np.float32)
    return out


def config_from_arrays(arrays: dict[str, np.ndarray]) -> ModelConfig:
    kwargs = {}
    defaults = asdict(ModelConfig())
    for k, default in defaults.items():
        key = "config." + k
        if key not in arrays:
            continue
        v = arrays[key]
        if isinstance(default, tuple):
            kwargs[k] = tuple(int(x) for x in v)
        elif isinstance(default, bool):
            kwargs[k] = bool(v[0])
        elif isinstance(default, int):
            kwargs[k] = int(v[0])
        else:
            kwargs[k] = float(v[0])
    return ModelConfig(**kwargs)


def save_checkpoint(path, state: ModelState, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = config_arrays(state.config)
    arrays.update({"param." + k: v for k, v in state.params.items()})
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays)


def load_checkpoint(path) -> tuple[ModelState, dict[str, np.ndarray]]:
    """Returns the model and any non-parameter records (e.g. optimizer state)."""
    arrays = load_arrays(path)
    cfg = config_from_arrays(arrays)
    state = build(cfg, seed=0)
    extra = {}
    for k, v in arrays.items():
        if k.startswith("param."):
            name = k[len("param."):]
            if name not in state.params or state.params[name].shape != v.shape:
                raise ValueError(f"{path}: parameter {name} does not fit the stored config")
            state.params[name] = v
        elif not k.startswith("config."):
            extra[k] = v
    return state, extra
