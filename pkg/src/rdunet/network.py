"""The U-shaped network: four contracting levels, a bridge, four expansive
levels and a 1x1 classifier head, with residual log-dense blocks inside.

:func:`layer_plan` describes the network row by row (ingredient, kernel,
output size). Building, running and cost accounting all walk that plan, so
shape inference needs no weights.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dense_block import STAGES, DenseBlockConfig, DenseBlockParams, dense_block_forward, init_dense_block
from .engine import ShapeError, Tensor, add
from .layers import BNParams, ConvParams, PreActUnit, UnpoolParams, conv2d, init_conv, init_unit, pre_activation_unit, unpool

LEVELS = 4


@dataclass(frozen=True)
class NetworkConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    base_width: int = 16
    growth_base: int = 4
    num_classes: int = 2
    growth_cap: int | None = None

    def __post_init__(self):
        div = 2**LEVELS
        if self.height % div or self.width % div or self.height <= 0 or self.width <= 0:
            raise ValueError(f"input size {self.height}x{self.width} must be divisible by {div} "
                             f"(four stride-2 downsamplings)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1 or self.base_width < 1 or self.growth_base < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def paper(cls) -> "NetworkConfig":
        return cls(height=320, width=320, in_channels=1, base_width=64, growth_base=8, num_classes=2)

    @classmethod
    def desk(cls) -> "NetworkConfig":
        return cls()

    def level_width(self, level: int) -> int:
        """Channel width of contracting level 1..4; level 5 is the bridge."""
        return self.base_width * 2 ** (level - 1)


@dataclass(frozen=True)
class PlanRow:
    level: str
    kind: str          # input | conv | bpc | dense | unpool | add | head
    kernel: int | None
    stride: int
    in_channels: int
    out_shape: tuple[int, int, int]    # (h, w, c)
    name: str = ""
    save_skip: bool = False

    @property
    def ingredient(self) -> str:
        return {
            "input": "Input", "conv": "Conv (stride 2)" if self.stride == 2 else "Conv",
            "bpc": "BN, PReLU, Conv", "dense": f"Dense ({STAGES} Conv)", "unpool": "Unpooling",
            "add": "Addition", "head": "Conv",
        }[self.kind]


def layer_plan(config: NetworkConfig) -> list[PlanRow]:
    """Row-by-row description of the network with inferred output sizes."""
    rows: list[PlanRow] = []
    h, w, c = config.height, config.width, config.in_channels

    def emit(level, kind, kernel, out_c, name="", stride=1, save_skip=False, scale=1.0):
        nonlocal h, w, c
        in_c = c
        if stride == 2:
            h, w = h // 2, w // 2
        h, w = int(h * scale), int(w * scale)
        c = out_c
        rows.append(PlanRow(level, kind, kernel, stride, in_c, (h, w, c), name, save_skip))

    emit("input", "input", None, c)
    for lv in range(1, LEVELS + 1):
        width = config.level_width(lv)
        tag = f"down{lv}"
        if lv == 1:
            emit(tag, "conv", 3, width, f"{tag}/conv_in")
        else:
            emit(tag, "conv", 2, c, f"{tag}/down", stride=2)
            emit(tag, "bpc", 3, width, f"{tag}/conv_in")
        emit(tag, "dense", 3, width, f"{tag}/block")
        emit(tag, "bpc", 2, width, f"{tag}/conv_out", save_skip=True)
    bridge = config.level_width(LEVELS + 1)
    emit("bridge", "conv", 2, c, "bridge/down", stride=2)
    emit("bridge", "bpc", 2, bridge, "bridge/conv_in")
    for lv in range(LEVELS, 0, -1):
        tag = f"up{lv}"
        emit(tag, "dense", 3, c, f"{tag}/block")
        emit(tag, "bpc", 2, c, f"{tag}/conv_out")
        emit(tag, "unpool", None, c // 2, f"{tag}/unpool", scale=2.0)
        emit(tag, "add", None, c, f"{tag}/skip")
        emit(tag, "bpc", 3, c, f"{tag}/conv_in")
    emit("head", "dense", 3, c, "head/block")
    emit("head", "bpc", 2, c, "head/conv_out")
    emit("head", "head", 1, config.num_classes, "head/classifier")
    return rows


def export_shape(config: NetworkConfig) -> tuple[int, int, int]:
    """Shape of the exported argmax mask (one channel)."""
    return (config.height, config.width, 1)


@dataclass
class Model:
    config: NetworkConfig
    plan: list[PlanRow]
    layers: dict = field(default_factory=dict)   # plan row name -> params object

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for row in self.plan:
            layer = self.layers.get(row.name)
            if layer is None:
                continue
            prefix = row.name
            for name, t in layer.parameters(prefix):
                out[name] = t
        return out

    def named_batch_norms(self) -> "OrderedDict[str, BNParams]":
        out = OrderedDict()
        for row in self.plan:
            layer = self.layers.get(row.name)
            if layer is not None and hasattr(layer, "batch_norms"):
                out.update(layer.batch_norms(row.name))
        return out

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, bn in self.named_batch_norms().items():
            out[f"{name}/running_mean"] = bn.running_mean
            out[f"{name}/running_var"] = bn.running_var
        return out

    def bn_layers(self) -> list[BNParams]:
        return list(self.named_batch_norms().values())

    def train(self, mode: bool = True) -> "Model":
        for bn in self.bn_layers():
            bn.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, t.data.copy()) for k, t in self.named_parameters().items())
        state.update((k, np.array(v, copy=True)) for k, v in self.named_buffers().items())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        bns = self.named_batch_norms()
        shapes = {k: t.shape for k, t in params.items()}
        for name, bn in bns.items():
            shapes[f"{name}/running_mean"] = shapes[f"{name}/running_var"] = (bn.channels,)
        for k in shapes:
            if k not in state:
                raise ShapeError(f"checkpoint lacks parameter {k}")
        for k in state:
            if k not in shapes:
                raise ShapeError(f"checkpoint has unknown parameter {k}")
            if np.shape(state[k]) != shapes[k]:
                raise ShapeError(f"parameter {k}: checkpoint shape {np.shape(state[k])} != model shape {shapes[k]}")
        for name, t in params.items():
            t.data[...] = state[name]
        for name, bn in bns.items():
            bn.running_mean = np.array(state[f"{name}/running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}/running_var"], dtype=np.float64)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def build_network(config: NetworkConfig, seed: int = 0) -> Model:
    """Initialize every layer of :func:`layer_plan` deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    plan = layer_plan(config)
    model = Model(config, plan)
    consumers_bn_only = _bias_free_rows(plan)
    for row in plan:
        c_out = row.out_shape[2]
        bias = row.name not in consumers_bn_only
        if row.kind == "conv":
            padding = "valid" if row.stride == 2 else "same"
            model.layers[row.name] = init_conv(rng, row.in_channels, c_out, row.kernel, row.stride, padding,
                                               bias=bias)
        elif row.kind == "head":
            model.layers[row.name] = init_conv(rng, row.in_channels, c_out, 1)
        elif row.kind == "bpc":
            model.layers[row.name] = init_unit(rng, row.in_channels, c_out, row.kernel, bias=bias)
        elif row.kind == "dense":
            block_cfg = DenseBlockConfig(c_out, config.growth_base, config.growth_cap)
            model.layers[row.name] = init_dense_block(block_cfg, rng)
        elif row.kind == "unpool":
            model.layers[row.name] = UnpoolParams(init_conv(rng, row.in_channels, c_out, 1, bias=bias))
    return model


def _bias_free_rows(plan: list[PlanRow]) -> set[str]:
    """Rows whose output reaches nothing but a batch norm (a bias there has zero gradient)."""
    free = set()
    for i, row in enumerate(plan[:-1]):
        nxt = plan[i + 1]
        if row.kind == "conv" and row.stride == 2:
            free.add(row.name)           # next row is always a BN-first unit
        elif row.kind == "bpc" and row.level.startswith("up") and nxt.kind == "unpool":
            free.add(row.name)           # unpool -> add -> BN-first unit
        elif row.kind == "unpool":
            free.add(row.name)
    return free


def forward(model: Model, batch: Tensor, record_shapes: list | None = None, zero_skips=()) -> Tensor:
    """Logits of shape (n, num_classes, h, w).

    ``zero_skips`` names up levels whose contracting-path feature is replaced
    by zeros before the addition (an ablation hook).
    """
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"input: expected (n, {cfg.in_channels}, h, w), got {batch.shape}")
    if batch.shape[2:] != (cfg.height, cfg.width):
        raise ShapeError(f"input: spatial size {batch.shape[2:]} != configured {(cfg.height, cfg.width)}")
    x = batch
    skips: list[Tensor] = []
    for row in model.plan:
        layer = model.layers.get(row.name)
        if row.kind == "input":
            pass
        elif row.kind in ("conv", "head"):
            x = conv2d(x, layer)
        elif row.kind == "bpc":
            x = pre_activation_unit(x, layer)
        elif row.kind == "dense":
            x = dense_block_forward(x, layer)
        elif row.kind == "unpool":
            x = unpool(x, layer)
        elif row.kind == "add":
            skip = skips.pop()
            if skip.shape != x.shape:
                raise ShapeError(f"{row.level}: skip {skip.shape} vs unpooled {x.shape}")
            if row.level in zero_skips:
                skip = Tensor(np.zeros(skip.shape))
            x = add(x, skip)
        expected = row.out_shape
        got = (x.shape[2], x.shape[3], x.shape[1])
        if got != expected:
            raise ShapeError(f"{row.level}: {row.ingredient} produced {got}, plan says {expected}")
        if record_shapes is not None:
            record_shapes.append((row.name or row.level, got))
        if row.save_skip:
            skips.append(x)
    return x


def predict_mask(model: Model, batch: Tensor) -> np.ndarray:
    """Argmax class ids, shape (n, h, w), with batch norms in inference mode."""
    was_training = [bn.training for bn in model.bn_layers()]
    model.eval()
    try:
        logits = forward(model, batch)
    finally:
        for bn, flag in zip(model.bn_layers(), was_training):
            bn.training = flag
    return logits.data.argmax(axis=1)


# ---------------------------------------------------------------------------
# cost accounting


def _conv_cost(c_in, c_out, k, h_out, w_out, bias=True):
    params = k * k * c_in * c_out + (c_out if bias else 0)
    return params, h_out * w_out * c_out * c_in * k * k


def count_params_and_flops(model: Model) -> dict:
    """Per-row and per-level parameter counts and forward multiply-adds."""
    rows, levels = [], OrderedDict()
    for row in model.plan:
        layer = model.layers.get(row.name)
        if layer is None:
            continue
        h, w, _ = row.out_shape
        params = sum(t.data.size for _, t in layer.parameters(row.name))
        if row.kind == "dense":
            cfg = layer.config
            macs = sum(h * w * cfg.emitted(m) * cfg.input_width(m) * cfg.kernel(m) ** 2
                       for m in range(1, STAGES + 1))
        elif row.kind == "unpool":
            proj = layer.projection
            macs = (h // 2) * (w // 2) * proj.in_channels * proj.out_channels
        else:
            conv = layer if isinstance(layer, ConvParams) else layer.conv
            macs = h * w * conv.out_channels * conv.in_channels * conv.kernel**2
        rows.append({"name": row.name, "level": row.level, "kind": row.kind, "params": params, "macs": macs})
        lv = levels.setdefault(row.level, {"params": 0, "macs": 0})
        lv["params"] += params
        lv["macs"] += macs
    blocks = [r for r in rows if r["kind"] == "dense"]
    return {
        "rows": rows,
        "blocks": blocks,
        "levels": levels,
        "total_params": sum(r["params"] for r in rows),
        "total_macs": sum(r["macs"] for r in rows),
    }


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RDUN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict) -> None:
    """Write ``name -> array`` as an RDUN container (little-endian, float64 payloads)."""
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    payload = []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<QB", arr.size, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.tobytes())
    Path(path).write_bytes(b"".join(header + payload))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            size, rank = struct.unpack_from("<QB", buf, pos)
            pos += 9
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            if int(np.prod(dims, dtype=np.int64)) != size:
                raise CheckpointError(f"{path}: {name} element count {size} disagrees with dims {dims}")
            manifest.append((name, size, dims))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated manifest at byte {pos}") from exc
    state = OrderedDict()
    for name, size, dims in manifest:
        end = pos + 8 * size
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name} at byte {pos}")
        state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos = end
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return state
