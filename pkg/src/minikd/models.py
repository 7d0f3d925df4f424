"""Miniature teacher and student networks as small layer graphs.

The teacher keeps the dual-branch layout: a plain conv/pool stack next to a
pre-activation residual stack, merged by channel concatenation, squeezed by an
unactivated 1×1 convolution and classified by FC-64 + dropout 0.5.  The
student is a MobileNetV2-style stack of inverted residual blocks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "ArchScale",
    "LayerSpec",
    "ModelGraph",
    "GraphBuilder",
    "build_mini_teacher",
    "build_mini_student",
    "forward",
    "count_params",
    "predict",
    "predict_from_logits",
    "make_rng",
]

LAYER_KINDS = (
    "conv",
    "depthwise-conv",
    "dense",
    "relu",
    "pool",
    "global-pool",
    "dropout",
    "concat",
    "residual-add",
    "flatten",
    "log-softmax",
)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) for ``seed``; an int or a sequence of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class ArchScale:
    """Size knobs for the miniature networks.

    ``stages`` is the number of 2× downsamplings in each teacher branch;
    ``vgg_convs`` and ``res_blocks`` are the per-stage block counts of the
    plain and residual branches.
    """

    side: int = 32
    width: int = 8
    stages: int = 2
    vgg_convs: int = 1
    res_blocks: int = 1
    head_width: int = 64
    student_blocks: int = 3
    expansion: int = 3

    def __post_init__(self):
        for name in ("width", "stages", "vgg_convs", "res_blocks", "head_width", "student_blocks", "expansion"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ArchScale.{name} must be positive, got {getattr(self, name)}")
        if self.side < 8:
            raise ValueError(f"ArchScale.side must be >= 8, got {self.side}")
        if self.side % (2**self.stages):
            raise ValueError(
                f"ArchScale.side={self.side} is not divisible by 2**stages={2 ** self.stages}; "
                "the two teacher branches would disagree in spatial size"
            )


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple
    hyper: dict = field(default_factory=dict)
    branch: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "hyper": dict(self.hyper)}
        if self.branch is not None:
            d["branch"] = self.branch
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], tuple(d["inputs"]), dict(d.get("hyper", {})), d.get("branch"))


def _param_shapes(spec: LayerSpec, in_shapes: list) -> dict:
    h = spec.hyper
    if spec.kind == "conv":
        c = in_shapes[0][0]
        return {"weight": (h["channels"], c, h["kernel"], h["kernel"]), "bias": (h["channels"],)}
    if spec.kind == "depthwise-conv":
        c = in_shapes[0][0]
        return {"weight": (c, 1, h["kernel"], h["kernel"]), "bias": (c,)}
    if spec.kind == "dense":
        return {"weight": (in_shapes[0][0], h["units"]), "bias": (h["units"],)}
    return {}


def _out_shape(spec: LayerSpec, in_shapes: list) -> tuple:
    h = spec.hyper
    k = spec.kind
    if k in ("conv", "depthwise-conv"):
        c, hh, ww = in_shapes[0]
        kern, s, p = h["kernel"], h.get("stride", 1), h.get("padding", 0)
        ho, wo = (hh + 2 * p - kern) // s + 1, (ww + 2 * p - kern) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {spec.name}: input {in_shapes[0]} too small for kernel {kern}")
        return (h["channels"] if k == "conv" else c, ho, wo)
    if k == "dense":
        if len(in_shapes[0]) != 1:
            raise ShapeError(f"layer {spec.name}: dense needs a flat input, got {in_shapes[0]}")
        return (h["units"],)
    if k == "pool":
        c, hh, ww = in_shapes[0]
        win, s = h["window"], h.get("stride", h["window"])
        ho, wo = (hh - win) // s + 1, (ww - win) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {spec.name}: input {in_shapes[0]} too small for pool window {win}")
        return (c, ho, wo)
    if k == "global-pool":
        return (in_shapes[0][0],)
    if k == "flatten":
        return (int(np.prod(in_shapes[0])),)
    if k == "concat":
        a, b = in_shapes
        if a[1:] != b[1:]:
            raise ShapeError(f"layer {spec.name}: concat inputs disagree spatially, {a} vs {b}")
        return (a[0] + b[0],) + a[1:]
    if k == "residual-add":
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"layer {spec.name}: residual-add inputs differ, {a} vs {b}")
        return a
    if k in ("relu", "dropout", "log-softmax"):
        return in_shapes[0]
    raise ValueError(f"unknown layer kind {k!r}")


class ModelGraph:
    """An ordered DAG of :class:`LayerSpec` nodes with named parameter tensors.

    Node ``"input"`` is implicit.  Parameters are named ``<layer>.weight`` and
    ``<layer>.bias``.
    """

    def __init__(self, kind: str, input_shape: tuple, classes: int, layers: list, output: Optional[str] = None):
        if classes < 2:
            raise ValueError(f"classes must be >= 2, got {classes}")
        self.kind = kind
        self.input_shape = tuple(int(v) for v in input_shape)
        self.classes = int(classes)
        self.layers = list(layers)
        self.output = output or self.layers[-1].name
        self.shapes = self._infer_shapes()
        self.params: dict[str, Tensor] = {}
        for spec in self.layers:
            for pname, shape in _param_shapes(spec, [self.shapes[i] for i in spec.inputs]).items():
                self.params[f"{spec.name}.{pname}"] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        if self.shapes[self.output] != (self.classes,):
            raise ShapeError(f"output {self.output} has shape {self.shapes[self.output]}, expected ({self.classes},)")

    def _infer_shapes(self) -> dict:
        shapes = {"input": self.input_shape}
        for spec in self.layers:
            if spec.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if spec.name in shapes:
                raise ValueError(f"duplicate layer name {spec.name!r}")
            missing = [i for i in spec.inputs if i not in shapes]
            if missing:
                raise ValueError(f"layer {spec.name} reads undefined nodes {missing}")
            shapes[spec.name] = _out_shape(spec, [shapes[i] for i in spec.inputs])
        return shapes

    # parameters --------------------------------------------------------------

    def parameters(self) -> list:
        return list(self.params.values())

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.params.values())

    def freeze(self) -> "ModelGraph":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "ModelGraph":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def init_params(self, seed) -> "ModelGraph":
        """He-style fan-in uniform weights, zero biases."""
        rng = make_rng(seed)
        for name, p in self.params.items():
            if name.endswith(".bias"):
                p.data[...] = 0.0
                continue
            shape = p.shape
            fan_in = shape[0] if p.data.ndim == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return self

    def copy(self) -> "ModelGraph":
        other = ModelGraph(self.kind, self.input_shape, self.classes, self.layers, self.output)
        for name, p in self.params.items():
            other.params[name].data[...] = p.data
            other.params[name].requires_grad = p.requires_grad
        return other

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # structure ---------------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def to_spec(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "output": self.output,
            "layers": [s.to_dict() for s in self.layers],
        }

    def spec_json(self) -> str:
        return json.dumps(self.to_spec(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_spec(cls, spec: dict) -> "ModelGraph":
        layers = [LayerSpec.from_dict(d) for d in spec["layers"]]
        return cls(spec["kind"], tuple(spec["input_shape"]), spec["classes"], layers, spec.get("output"))

    def validate(self) -> None:
        self._infer_shapes()
        if self.kind == "teacher":
            concats = [s for s in self.layers if s.kind == "concat"]
            if len(concats) != 1 or len(concats[0].inputs) != 2:
                raise ValueError("teacher graph must contain exactly one two-input concat")

    def __repr__(self) -> str:
        return f"ModelGraph(kind={self.kind!r}, layers={len(self.layers)}, params={count_params(self)})"


class GraphBuilder:
    """Incremental helper that tracks shapes while appending layers."""

    def __init__(self, input_shape: tuple):
        self.layers: list = []
        self.shapes = {"input": tuple(input_shape)}

    def add(self, name, kind, inputs, branch=None, **hyper) -> str:
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        spec = LayerSpec(name, kind, inputs, hyper, branch)
        self.shapes[name] = _out_shape(spec, [self.shapes[i] for i in inputs])
        self.layers.append(spec)
        return name

    def channels(self, node: str) -> int:
        return self.shapes[node][0]


def _preact_block(g: GraphBuilder, x: str, out_ch: int, prefix: str, branch: str) -> str:
    pre = g.add(f"{prefix}.preact", "relu", x, branch)
    h = g.add(f"{prefix}.conv1", "conv", pre, branch, channels=out_ch, kernel=3, stride=1, padding=1)
    h = g.add(f"{prefix}.relu1", "relu", h, branch)
    h = g.add(f"{prefix}.conv2", "conv", h, branch, channels=out_ch, kernel=3, stride=1, padding=1)
    skip = x
    if g.channels(x) != out_ch:
        skip = g.add(f"{prefix}.proj", "conv", pre, branch, channels=out_ch, kernel=1, stride=1, padding=0)
    return g.add(f"{prefix}.add", "residual-add", (h, skip), branch)


def build_mini_teacher(scale: ArchScale = ArchScale(), classes: int = 2, seed=0, in_channels: int = 1) -> ModelGraph:
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    g = GraphBuilder((in_channels, scale.side, scale.side))
    w = scale.width

    # branch a: plain conv stacks with max pooling
    x = "input"
    for s in range(scale.stages):
        for c in range(scale.vgg_convs):
            x = g.add(f"a.s{s}.conv{c}", "conv", x, "a", channels=w * 2**s, kernel=3, stride=1, padding=1)
            x = g.add(f"a.s{s}.relu{c}", "relu", x, "a")
        x = g.add(f"a.s{s}.pool", "pool", x, "a", window=2, stride=2)
    branch_a = x

    # branch b: strided stem then pre-activation residual stages
    x = g.add("b.stem", "conv", "input", "b", channels=w, kernel=3, stride=2, padding=1)
    for s in range(scale.stages):
        for r in range(scale.res_blocks):
            x = _preact_block(g, x, w * 2**s, f"b.s{s}.block{r}", "b")
        if s < scale.stages - 1:
            x = g.add(f"b.s{s}.pool", "pool", x, "b", window=2, stride=2)
    branch_b = g.add("b.out", "relu", x, "b")

    if g.shapes[branch_a] != g.shapes[branch_b]:
        raise ShapeError(f"teacher branches disagree: {g.shapes[branch_a]} vs {g.shapes[branch_b]}")

    x = g.add("merge", "concat", (branch_a, branch_b))
    # 1×1 squeeze to a quarter of the merged channels, deliberately unactivated
    x = g.add("head.squeeze", "conv", x, channels=max(1, g.channels(x) // 4), kernel=1, stride=1, padding=0)
    x = g.add("head.flatten", "flatten", x)
    x = g.add("head.fc", "dense", x, units=scale.head_width)
    x = g.add("head.relu", "relu", x)
    x = g.add("head.dropout", "dropout", x, rate=0.5)
    x = g.add("head.logits", "dense", x, units=classes)
    model = ModelGraph("teacher", (in_channels, scale.side, scale.side), classes, g.layers, x)
    model.validate()
    return model.init_params(seed)


def _inverted_residual(g: GraphBuilder, x: str, out_ch: int, stride: int, expansion: int, prefix: str) -> str:
    in_ch = g.channels(x)
    hidden = in_ch * expansion
    h = g.add(f"{prefix}.expand", "conv", x, channels=hidden, kernel=1, stride=1, padding=0)
    h = g.add(f"{prefix}.relu1", "relu", h)
    h = g.add(f"{prefix}.dw", "depthwise-conv", h, kernel=3, stride=stride, padding=1)
    h = g.add(f"{prefix}.relu2", "relu", h)
    h = g.add(f"{prefix}.project", "conv", h, channels=out_ch, kernel=1, stride=1, padding=0)
    if stride == 1 and in_ch == out_ch:
        h = g.add(f"{prefix}.add", "residual-add", (h, x))
    return h


def student_block_plan(scale: ArchScale) -> list:
    """(out_channels, stride) per inverted residual block.

    Width doubles with a stride-2 block at evenly spaced positions, ending at
    the teacher's branch width.
    """
    plan = []
    downs = scale.stages - 1
    n = scale.student_blocks
    down_at = {round((i + 1) * n / (downs + 1)) - 1 for i in range(downs)} if downs else set()
    ch = scale.width
    for i in range(n):
        if i in down_at and i > 0:
            ch *= 2
            plan.append((ch, 2))
        else:
            plan.append((ch, 1))
    return plan


def build_mini_student(scale: ArchScale = ArchScale(), classes: int = 2, seed=0, in_channels: int = 1) -> ModelGraph:
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    g = GraphBuilder((in_channels, scale.side, scale.side))
    x = g.add("stem", "conv", "input", channels=scale.width, kernel=3, stride=2, padding=1)
    x = g.add("stem.relu", "relu", x)
    for i, (ch, stride) in enumerate(student_block_plan(scale)):
        x = _inverted_residual(g, x, ch, stride, scale.expansion, f"ir{i}")
    x = g.add("pool", "global-pool", x)
    x = g.add("logits", "dense", x, units=classes)
    model = ModelGraph("student", (in_channels, scale.side, scale.side), classes, g.layers, x)
    model.validate()
    return model.init_params(seed)


def _run_layer(model: ModelGraph, spec: LayerSpec, xs: list, training: bool, rng) -> Tensor:
    h = spec.hyper
    p = model.params
    k = spec.kind
    if k == "conv":
        return ad.conv2d(xs[0], p[f"{spec.name}.weight"], p[f"{spec.name}.bias"], h.get("stride", 1), h.get("padding", 0))
    if k == "depthwise-conv":
        return ad.depthwise_conv2d(
            xs[0], p[f"{spec.name}.weight"], p[f"{spec.name}.bias"], h.get("stride", 1), h.get("padding", 0)
        )
    if k == "dense":
        return ad.dense(xs[0], p[f"{spec.name}.weight"], p[f"{spec.name}.bias"])
    if k == "relu":
        return ad.relu(xs[0])
    if k == "pool":
        return ad.max_pool2d(xs[0], h["window"], h.get("stride", h["window"]))
    if k == "global-pool":
        return ad.global_avg_pool2d(xs[0])
    if k == "flatten":
        return ad.flatten(xs[0])
    if k == "concat":
        return ad.concat_channels(xs[0], xs[1])
    if k == "residual-add":
        return ad.add(xs[0], xs[1])
    if k == "dropout":
        return ad.dropout(xs[0], h["rate"], training, rng)
    if k == "log-softmax":
        return ad.log_softmax(xs[0])
    raise ValueError(f"unknown layer kind {k!r}")


def forward(model: ModelGraph, batch, training: bool = False, rng_seed=0) -> Tensor:
    """Run the graph on an N×C×H×W batch and return N×classes logits."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    rng = make_rng(rng_seed) if training else None
    values = {"input": x}
    for spec in model.layers:
        values[spec.name] = _run_layer(model, spec, [values[i] for i in spec.inputs], training, rng)
    return values[model.output]


def count_params(model: ModelGraph) -> int:
    return int(sum(p.size for p in model.params.values()))


def predict_from_logits(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lower class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def predict(model: ModelGraph, batch, batch_size: int = 256) -> np.ndarray:
    batch = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    out = [predict_from_logits(forward(model, batch[i : i + batch_size])) for i in range(0, len(batch), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
