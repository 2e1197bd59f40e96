"""Symbolic architectures, layer-replacement surgery and parameter accounting.

A :class:`ModelSpec` is an ordered list of :class:`LayerDesc` records.  The
"countable" layers are the units the modified-layer percentage is measured
in: plain convolutions for VGG-style nets, whole bottleneck sub-modules for
residual nets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

SPEC_HEADER = "shuffleconv-modelspec"
SPEC_VERSION = 1

LAYER_KINDS = ("conv", "shuffle_conv", "bn", "relu", "maxpool", "gap", "flatten", "linear", "bottleneck")
SHUFFLE_MECHANISMS = ("spatial", "patch", "channel")
MECHANISMS = SHUFFLE_MECHANISMS + ("gapfc",)

VGG16_CONFIG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
VGG_TINY_CONFIG = (8, 16, "M", 32, 32, "M", 64, 64, "M")
RESNET_DEPTHS = {
    "50": ((3, 4, 6, 3), 64),
    "tiny": ((1, 1, 1, 1), 8),
}


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    params: dict = field(default_factory=dict)
    countable: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)

    def with_params(self, **changes) -> "LayerDesc":
        return replace(self, params={**self.params, **changes})


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerDesc, ...]
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def countable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.countable]

    @property
    def countable_count(self) -> int:
        return len(self.countable_indices)


@dataclass(frozen=True)
class SurgeryPlan:
    """Which countable layers get which mechanism.

    ``k_last`` selects the trailing countable layers; ``layers`` (1-based
    countable indices) overrides it for single-layer shuffles.
    """

    mechanism: str
    k_last: int = 0
    patch: int | None = None
    share_skip_permutation: bool = True
    keep_bn: bool = True
    layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.mechanism == "patch" and (self.patch is None or self.patch <= 0):
            raise ValueError("patch mechanism needs a positive patch size")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted(set(int(i) for i in self.layers))))

    def targets(self, spec: ModelSpec) -> list[int]:
        """Positions in ``spec.layers`` that this plan modifies."""
        countable = spec.countable_indices
        if self.layers is not None:
            bad = [i for i in self.layers if not 1 <= i <= len(countable)]
            if bad:
                raise ValueError(f"layer indices {bad} outside 1..{len(countable)} for {spec.name}")
            return [countable[i - 1] for i in self.layers]
        if not 0 <= self.k_last <= len(countable):
            raise ValueError(f"k_last={self.k_last} outside 0..{len(countable)} for {spec.name}")
        return countable[len(countable) - self.k_last:] if self.k_last else []


# --- shape inference -----------------------------------------------------------------------

def _conv_extent(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def layer_output_shape(layer: LayerDesc, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Output (C, H, W) of ``layer`` given its input; vectors are (F, 1, 1)."""
    c, h, w = shape
    kind = layer.kind
    if kind in ("conv", "shuffle_conv"):
        if layer["in"] != c:
            raise ValueError(f"{kind} expects {layer['in']} input channels, got {c}")
        return (layer["out"], _conv_extent(h, layer["k"], layer["stride"], layer["pad"]),
                _conv_extent(w, layer["k"], layer["stride"], layer["pad"]))
    if kind == "bn":
        if layer["channels"] != c:
            raise ValueError(f"bn expects {layer['channels']} channels, got {c}")
        return shape
    if kind == "relu":
        return shape
    if kind == "maxpool":
        k, s, p = layer["k"], layer["stride"], layer.get("pad", 0)
        if k > h + 2 * p or k > w + 2 * p:
            raise ValueError(f"pool window {k} exceeds map {h}x{w}")
        return (c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if kind == "gap":
        return (c, 1, 1)
    if kind == "flatten":
        return (c * h * w, 1, 1)
    if kind == "linear":
        features = c * h * w
        if h != 1 or w != 1:
            raise ValueError(f"linear needs a flat input, got map {c}x{h}x{w}")
        if layer["in"] != features:
            raise ValueError(f"linear expects {layer['in']} features, got {features}")
        return (layer["out"], 1, 1)
    if kind == "bottleneck":
        if layer["in"] != c:
            raise ValueError(f"bottleneck expects {layer['in']} channels, got {c}")
        s = layer["stride"]
        return (layer["out"], _conv_extent(h, 3, s, 1), _conv_extent(w, 3, s, 1))
    raise ValueError(f"unknown layer kind {kind!r}")


def infer_shapes(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """Shape after every layer; raises if consecutive layers do not chain."""
    shape = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        try:
            shape = layer_output_shape(layer, shape)
        except ValueError as exc:
            raise ValueError(f"{spec.name} layer {i} ({layer.kind}): {exc}") from None
        shapes.append(shape)
    if shapes and shapes[-1] != (spec.classes, 1, 1):
        raise ValueError(f"{spec.name} ends in shape {shapes[-1]}, expected {spec.classes} logits")
    return shapes


def input_shapes(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """Shape entering every layer."""
    return [spec.input_shape] + infer_shapes(spec)[:-1]


# --- builders --------------------------------------------------------------------------------

def conv(cin, cout, k=3, stride=1, pad=1, bias=True, countable=False) -> LayerDesc:
    return LayerDesc("conv", {"in": cin, "out": cout, "k": k, "stride": stride, "pad": pad, "bias": bias},
                     countable)


def build_vgg(config, input_shape=(3, 32, 32), classes=100, with_bn=True, name="vgg") -> ModelSpec:
    layers = []
    c, h, w = input_shape
    for item in config:
        if item == "M":
            layers.append(LayerDesc("maxpool", {"k": 2, "stride": 2, "pad": 0}))
            h, w = h // 2, w // 2
            continue
        layers.append(conv(c, item, bias=True, countable=True))
        if with_bn:
            layers.append(LayerDesc("bn", {"channels": item}))
        layers.append(LayerDesc("relu"))
        c = item
    layers.append(LayerDesc("flatten"))
    layers.append(LayerDesc("linear", {"in": c * h * w, "out": classes, "bias": True}))
    spec = ModelSpec(name, tuple(layers), input_shape, classes)
    infer_shapes(spec)
    return spec


def build_vgg16(input_shape=(3, 32, 32), classes=100, with_bn=True) -> ModelSpec:
    if min(input_shape[1:]) < 32:
        raise ValueError(f"VGG-16 needs a spatial extent of at least 32, got {input_shape[1:]}")
    return build_vgg(VGG16_CONFIG, input_shape, classes, with_bn, name="vgg16")


def build_vgg_tiny(input_shape=(3, 16, 16), classes=4, with_bn=True, widths=VGG_TINY_CONFIG) -> ModelSpec:
    """Six-conv VGG-style net for desk-scale runs on small synthetic images."""
    return build_vgg(widths, input_shape, classes, with_bn, name="vgg-tiny")


def bottleneck(cin, mid, cout, stride=1, with_bn=True) -> LayerDesc:
    return LayerDesc("bottleneck", {"in": cin, "mid": mid, "out": cout, "stride": stride, "bn": with_bn,
                                    "shuffle": None, "patch": 0, "share_skip": True}, countable=True)


def build_resnet_bottleneck(depth="50", input_shape=(3, 32, 32), classes=100, small_stem=True,
                            width: int | None = None) -> ModelSpec:
    """Bottleneck ResNet; ``small_stem`` swaps the 7x7/2 stem and max pool for one 3x3/1 conv."""
    if depth not in RESNET_DEPTHS:
        raise ValueError(f"depth must be one of {sorted(RESNET_DEPTHS)}, got {depth!r}")
    blocks, base = RESNET_DEPTHS[depth]
    base = width or base
    layers = []
    if small_stem:
        layers.append(conv(input_shape[0], base, k=3, stride=1, pad=1, bias=False))
    else:
        layers.append(conv(input_shape[0], base, k=7, stride=2, pad=3, bias=False))
    layers += [LayerDesc("bn", {"channels": base}), LayerDesc("relu")]
    if not small_stem:
        layers.append(LayerDesc("maxpool", {"k": 3, "stride": 2, "pad": 1}))
    cin = base
    for stage, count in enumerate(blocks):
        mid = base * 2 ** stage
        for b in range(count):
            stride = 2 if stage > 0 and b == 0 else 1
            layers.append(bottleneck(cin, mid, mid * 4, stride))
            cin = mid * 4
    layers += [LayerDesc("gap"), LayerDesc("flatten"),
               LayerDesc("linear", {"in": cin, "out": classes, "bias": True})]
    name = f"resnet{depth}" + ("-smallstem" if small_stem else "")
    spec = ModelSpec(name, tuple(layers), input_shape, classes)
    infer_shapes(spec)
    return spec


def build_mlp_reference(classes=100, input_shape=(3, 32, 32), hidden=512) -> ModelSpec:
    features = math.prod(input_shape)
    layers = (LayerDesc("flatten"),
              LayerDesc("linear", {"in": features, "out": hidden, "bias": True}),
              LayerDesc("relu"),
              LayerDesc("linear", {"in": hidden, "out": classes, "bias": True}))
    spec = ModelSpec("mlp", layers, input_shape, classes)
    infer_shapes(spec)
    return spec


def build_model(name: str, input_shape=(3, 32, 32), classes=100, with_bn=True, small_stem=True) -> ModelSpec:
    """Look up a zoo architecture by name."""
    input_shape = tuple(input_shape)
    if name == "vgg16":
        return build_vgg16(input_shape, classes, with_bn)
    if name == "vgg-tiny":
        return build_vgg_tiny(input_shape, classes, with_bn)
    if name in ("resnet50", "resnet-tiny"):
        return build_resnet_bottleneck("50" if name == "resnet50" else "tiny", input_shape, classes, small_stem)
    if name == "mlp":
        return build_mlp_reference(classes, input_shape)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")


MODEL_NAMES = ("vgg16", "vgg-tiny", "resnet50", "resnet-tiny", "mlp")


# --- surgery ---------------------------------------------------------------------------------

def percent_to_k(spec: ModelSpec, percent: float) -> int:
    """Trailing countable layers for a percentage, rounding halves up."""
    if not 0 <= percent <= 100:
        raise ValueError(f"percent must lie in [0, 100], got {percent}")
    n = spec.countable_count
    k = math.floor(percent * n / 100 + 0.5)
    return min(max(k, 0), n)


def apply_surgery(spec: ModelSpec, plan: SurgeryPlan) -> ModelSpec:
    targets = plan.targets(spec)
    if not targets:
        return spec
    if plan.mechanism == "gapfc":
        return _gap_fc(spec, plan, targets)

    layers = list(spec.layers)
    for i in targets:
        layer = layers[i]
        if layer.kind == "bottleneck":
            layers[i] = layer.with_params(shuffle=plan.mechanism, patch=plan.patch or 0,
                                          share_skip=plan.share_skip_permutation)
        else:
            params = {**layer.params, "mechanism": plan.mechanism, "patch": plan.patch or 0}
            layers[i] = LayerDesc("shuffle_conv", params, countable=True)
    return replace(spec, layers=tuple(layers))


def _gap_fc(spec: ModelSpec, plan: SurgeryPlan, targets: list[int]) -> ModelSpec:
    start = targets[0]
    countable = spec.countable_indices
    if targets != countable[countable.index(start):]:
        raise ValueError("gapfc replaces a contiguous run of trailing countable layers only")
    shapes = input_shapes(spec)
    layers = list(spec.layers[:start]) + [LayerDesc("gap")]
    width = shapes[start][0]
    for layer in spec.layers[start:]:
        kind = layer.kind
        if layer.countable:
            out = layer["out"]
            bias = layer.get("bias", True) if kind != "bottleneck" else True
            layers.append(LayerDesc("linear", {"in": width, "out": out, "bias": bias}, countable=True))
            if kind == "bottleneck":
                if plan.keep_bn and layer.get("bn", True):
                    layers.append(LayerDesc("bn", {"channels": out}))
                layers.append(LayerDesc("relu"))
            width = out
        elif kind == "bn":
            if plan.keep_bn:
                layers.append(layer)
        elif kind in ("maxpool", "gap"):
            continue  # spatial extent is already 1x1
        elif kind == "linear":
            layers.append(layer.with_params(**{"in": width}))
            width = layer["out"]
        else:
            layers.append(layer)
    out = replace(spec, layers=tuple(layers))
    infer_shapes(out)
    return out


# --- parameter accounting --------------------------------------------------------------------

def layer_param_count(layer: LayerDesc) -> int:
    """Closed-form trainable parameters of one layer (running BN statistics excluded)."""
    kind = layer.kind
    if kind in ("conv", "shuffle_conv"):
        return layer["out"] * layer["in"] * layer["k"] ** 2 + (layer["out"] if layer["bias"] else 0)
    if kind == "bn":
        return 2 * layer["channels"]
    if kind == "linear":
        return layer["out"] * layer["in"] + (layer["out"] if layer["bias"] else 0)
    if kind == "bottleneck":
        cin, mid, cout = layer["in"], layer["mid"], layer["out"]
        bn = 2 if layer.get("bn", True) else 0
        total = cin * mid + 9 * mid * mid + mid * cout + bn * (2 * mid + cout)
        if needs_projection(layer):
            total += cin * cout + bn * cout
        return total
    return 0


def needs_projection(layer: LayerDesc) -> bool:
    return layer["stride"] != 1 or layer["in"] != layer["out"]


def count_params(spec: ModelSpec) -> int:
    infer_shapes(spec)
    return sum(layer_param_count(layer) for layer in spec.layers)


# --- text serialization ----------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def _parse(text: str):
    if text in ("true", "false"):
        return text == "true"
    if text == "none":
        return None
    try:
        return int(text)
    except ValueError:
        return text


def dump_spec(spec: ModelSpec) -> str:
    lines = [f"{SPEC_HEADER} {SPEC_VERSION}",
             f"name {spec.name}",
             "input " + " ".join(str(v) for v in spec.input_shape),
             f"classes {spec.classes}"]
    for layer in spec.layers:
        fields = [layer.kind] + [f"{k}={_fmt(v)}" for k, v in layer.params.items()]
        fields.append(f"countable={_fmt(layer.countable)}")
        lines.append("layer " + " ".join(fields))
    return "\n".join(lines) + "\n"


def load_spec(text: str) -> ModelSpec:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or not lines[0].startswith(SPEC_HEADER):
        raise ValueError("not a model spec file (missing header)")
    version = int(lines[0].split()[1])
    if version != SPEC_VERSION:
        raise ValueError(f"unsupported model spec version {version}")
    name, input_shape, classes, layers = None, None, None, []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "name":
            name = rest
        elif key == "input":
            input_shape = tuple(int(v) for v in rest.split())
        elif key == "classes":
            classes = int(rest)
        elif key == "layer":
            kind, *pairs = rest.split()
            params = dict(p.split("=", 1) for p in pairs)
            countable = _parse(params.pop("countable", "false"))
            layers.append(LayerDesc(kind, {k: _parse(v) for k, v in params.items()}, countable))
        else:
            raise ValueError(f"unexpected line in model spec: {line!r}")
    if name is None or input_shape is None or classes is None:
        raise ValueError("model spec needs name, input and classes lines")
    return ModelSpec(name, tuple(layers), input_shape, classes)
