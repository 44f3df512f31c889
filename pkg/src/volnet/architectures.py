"""Declarative model specs and the layer-chain model they build into.

Five architecture families are provided: a plain stacked-conv network (vgg),
residual networks in 18/34-layer configurations (resnet18/34), and the same
residual networks with self-attention blocks in the later stages
(resattnet18/34). All share a stem of three 3x3x3 stride-1 convolutions
(receptive field 7^3) and a global-average-pool + linear head over 2 classes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import ConvBlock, ResidualBlock
from .layers import FC, GlobalAvgPool, Layer, MaxPool3D, Param
from .tensor import ShapeError, resolve_dtype

CHECKPOINT_MAGIC = b"VNET1"

BASE_WIDTHS = (64, 128, 256, 512)
MICRO_WIDTH_MULT = 0.125

# Registered-volume input extent for which the deepest feature map is 6x7x6
# and the first-stage map is 46x55x46.
PAPER_SIZE_INPUT = (92, 110, 92)


class UnknownLayerError(KeyError):
    """A layer name that does not exist in the model."""


@dataclass(frozen=True)
class StageSpec:
    block_type: str          # vgg | res | res_att
    blocks: int
    channels: int
    stride: int

    def __post_init__(self):
        if self.block_type not in ("vgg", "res", "res_att"):
            raise ValueError(f"unknown block type {self.block_type!r}")
        if self.blocks < 1 or self.channels < 1 or self.stride < 1:
            raise ValueError(f"invalid stage {self}")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    stem_channels: int
    stages: tuple[StageSpec, ...]
    num_classes: int = 2
    in_channels: int = 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stem_channels": self.stem_channels,
            "stages": [[s.block_type, s.blocks, s.channels, s.stride]
                       for s in self.stages],
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchitectureSpec":
        stages = tuple(StageSpec(*s) for s in d["stages"])
        return ArchitectureSpec(d["name"], d["stem_channels"], stages,
                                d.get("num_classes", 2), d.get("in_channels", 1))


def _scaled(width: int, mult: float) -> int:
    return max(1, round(width * mult))


RESNET_BLOCK_COUNTS = {"18": (2, 2, 2, 2), "34": (3, 4, 6, 3)}
VGG_BLOCK_COUNTS = (1, 2, 2, 2)  # + 3 stem convs + head FC = 11 weight layers

MODEL_NAMES = ("vgg", "resnet18", "resnet34", "resattnet18", "resattnet34")


def make_spec(name: str, width_mult: float = 1.0,
              attention_stages: tuple[int, ...] = (3, 4)) -> ArchitectureSpec:
    """Build the spec for a named model; `micro-<name>` applies a 1/8 width.

    attention_stages selects which stages (1-based) use attention blocks in
    the resattnet variants; attention in the early, high-resolution stages is
    quadratic in voxel count and off by default.
    """
    if name.startswith("micro-") or name.startswith("micro_"):
        base = make_spec(name[6:], width_mult * MICRO_WIDTH_MULT, attention_stages)
        return ArchitectureSpec(f"micro-{name[6:]}", base.stem_channels,
                                base.stages, base.num_classes, base.in_channels)
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES} "
                         f"or a micro- prefix")
    widths = tuple(_scaled(wd, width_mult) for wd in BASE_WIDTHS)
    stem = widths[0]
    if name == "vgg":
        stages = tuple(StageSpec("vgg", n, c, 2)
                       for n, c in zip(VGG_BLOCK_COUNTS, widths))
        return ArchitectureSpec("vgg", stem, stages)
    depth = name.replace("resattnet", "").replace("resnet", "")
    counts = RESNET_BLOCK_COUNTS[depth]
    attentive = name.startswith("resattnet")
    stages = []
    for i, (n, c) in enumerate(zip(counts, widths), start=1):
        btype = "res_att" if attentive and i in attention_stages else "res"
        stages.append(StageSpec(btype, n, c, 2))
    return ArchitectureSpec(name, stem, tuple(stages))


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def stage_output_shapes(spec: ArchitectureSpec,
                        spatial: tuple[int, int, int]) -> list[tuple[str, tuple[int, int, int]]]:
    """Analytic per-stage spatial dims: [('stem', dims), ('s1', dims), ...].

    Raises ShapeError naming the first stage whose output would collapse.
    """
    dims = tuple(spatial)
    shapes = [("stem", dims)]
    for i, st in enumerate(spec.stages, start=1):
        if st.block_type == "vgg":
            if min(dims) < 2:
                raise ShapeError(f"stage s{i}: spatial dims {dims} too small to pool")
            dims = tuple(d // 2 for d in dims) if st.stride == 2 else dims
        else:
            dims = tuple(conv_out(d, 3, st.stride, 1) for d in dims)
            if min(dims) < 1:
                raise ShapeError(f"stage s{i}: spatial dims collapse to {dims}")
        shapes.append((f"s{i}", dims))
    return shapes


class Model:
    """An ordered chain of named layers ending in a (N, num_classes) head.

    Every chain element's output is recorded during forward so arbitrary
    feature maps can be read back (activations_at) and gradients can be cut
    short at a named layer (backward_to), which is what heatmap explanation
    needs.
    """

    def __init__(self, spec: ArchitectureSpec, layers: list[Layer], dtype: str):
        self.spec = spec
        self.layers = layers
        self.dtype_name = dtype
        self._index = {}
        for i, layer in enumerate(layers):
            if layer.name in self._index:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            self._index[layer.name] = i
        self._outputs: dict[str, np.ndarray] = {}
        self._params = []
        seen = set()
        for layer in layers:
            for p in layer.params():
                if p.name in seen:
                    raise ValueError(f"duplicate parameter name {p.name!r}")
                seen.add(p.name)
                self._params.append(p)

    # -- introspection ----------------------------------------------------
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def feature_layer_names(self) -> list[str]:
        """Names of layers whose outputs are 5-D conv feature maps."""
        return [l.name for l in self.layers
                if not isinstance(l, (GlobalAvgPool, FC))]

    def parameters(self) -> list[Param]:
        return self._params

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self._params))

    def zero_grads(self):
        for p in self._params:
            p.zero_grad()

    def _layer_index(self, name: str) -> int:
        if name not in self._index:
            raise UnknownLayerError(
                f"unknown layer {name!r}; available: {', '.join(self.layer_names())}")
        return self._index[name]

    # -- execution ---------------------------------------------------------
    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        self._outputs.clear()
        out = x
        for layer in self.layers:
            out = layer.forward(out, mode)
            self._outputs[layer.name] = out
        return out

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        grad = grad_logits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def backward_to(self, layer_name: str, grad_logits: np.ndarray) -> np.ndarray:
        """Backpropagate from the head down to (not through) the named layer,
        returning the gradient at that layer's output."""
        idx = self._layer_index(layer_name)
        grad = grad_logits
        for layer in reversed(self.layers[idx + 1:]):
            grad = layer.backward(grad)
        return grad

    def forward_from(self, layer_name: str, feat: np.ndarray,
                     mode: str = "eval") -> np.ndarray:
        """Run only the chain above the named layer, taking `feat` as that
        layer's output."""
        idx = self._layer_index(layer_name)
        out = feat
        for layer in self.layers[idx + 1:]:
            out = layer.forward(out, mode)
        return out

    def activations_at(self, x: np.ndarray, layer_name: str,
                       mode: str = "eval") -> np.ndarray:
        """Forward `x` and return the named layer's post-activation output."""
        idx = self._layer_index(layer_name)
        self.forward(x, mode)
        return self._outputs[self.layers[idx].name]

    def recorded_output(self, layer_name: str) -> np.ndarray:
        self._layer_index(layer_name)
        if layer_name not in self._outputs:
            raise RuntimeError(f"no recorded forward pass for layer {layer_name!r}")
        return self._outputs[layer_name]

    # -- state -------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for p in self._params:
            state[p.name] = p.data
        for layer in self.layers:
            for name, buf in layer.buffers():
                state[name] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if name in own:
                if own[name].shape != arr.shape:
                    raise ShapeError(f"{name}: shape {arr.shape} != {own[name].shape}")
                own[name][...] = arr


def build(spec: ArchitectureSpec, input_spatial: tuple[int, int, int] | None = None,
          seed: int = 0, dtype: str = "f32") -> Model:
    """Instantiate a model from its spec with seeded, deterministic init."""
    dt_name = "f64" if resolve_dtype(dtype) == np.float64 else "f32"
    if input_spatial is not None:
        stage_output_shapes(spec, input_spatial)
    rng = np.random.Generator(np.random.PCG64(seed))
    layers: list[Layer] = []
    c_prev = spec.in_channels
    for i in range(1, 4):
        layers.append(ConvBlock(f"stem{i}", c_prev, spec.stem_channels,
                                3, 1, dt_name, rng))
        c_prev = spec.stem_channels
    for i, st in enumerate(spec.stages, start=1):
        if st.block_type == "vgg":
            for j in range(1, st.blocks + 1):
                layers.append(ConvBlock(f"s{i}b{j}", c_prev, st.channels,
                                        3, 1, dt_name, rng))
                c_prev = st.channels
            if st.stride == 2:
                layers.append(MaxPool3D(f"s{i}pool"))
        else:
            attention = st.block_type == "res_att"
            for j in range(1, st.blocks + 1):
                stride = st.stride if j == 1 else 1
                layers.append(ResidualBlock(f"s{i}b{j}", c_prev, st.channels,
                                            stride, attention, dt_name, rng))
                c_prev = st.channels
    layers.append(GlobalAvgPool("gap"))
    layers.append(FC("fc", c_prev, spec.num_classes, dt_name, rng))
    return Model(spec, layers, dt_name)


def build_named(name: str, width_mult: float = 1.0, seed: int = 0,
                dtype: str = "f32",
                attention_stages: tuple[int, ...] = (3, 4)) -> Model:
    return build(make_spec(name, width_mult, attention_stages), seed=seed, dtype=dtype)


def copy_matching_params(src: Model, dst: Model) -> list[str]:
    """Copy every identically named, identically shaped state entry from src
    to dst; returns the copied names."""
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    copied = []
    for name, arr in src_state.items():
        if name in dst_state and dst_state[name].shape == arr.shape:
            dst_state[name][...] = arr
            copied.append(name)
    return copied


# -- checkpoint container ---------------------------------------------------

def save_checkpoint(model: Model, path):
    """Write magic + JSON manifest + raw little-endian parameter payload."""
    state = model.state_dict()
    dt = "<f8" if model.dtype_name == "f64" else "<f4"
    manifest = {
        "format": "VNET1",
        "dtype": model.dtype_name,
        "arch": model.spec.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in state.values():
            f.write(np.ascontiguousarray(v, dtype=dt).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(length).decode("utf-8"))
        dt = np.dtype("<f8" if manifest["dtype"] == "f64" else "<f4")
        state = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * dt.itemsize)
            if len(raw) != n * dt.itemsize:
                raise ValueError(f"{path}: truncated checkpoint at {entry['name']}")
            state[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return manifest, state


def build_from_checkpoint(path) -> Model:
    manifest, state = load_checkpoint(path)
    spec = ArchitectureSpec.from_dict(manifest["arch"])
    model = build(spec, seed=0, dtype=manifest["dtype"])
    model.load_state_dict(state)
    return model
