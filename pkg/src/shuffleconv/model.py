"""Runnable models instantiated from a :class:`~shuffleconv.zoo.ModelSpec`.

Parameters are keyed by layer position, so a shuffle surgery (which only
swaps ``conv`` for ``shuffle_conv`` in place) yields a spec that binds to the
same parameter table.  That is how a network trained without shuffling is
evaluated with shuffling switched on, and vice versa.
"""
from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .shuffle import ShuffleStream, draw_permutation, permute
from .zoo import ModelSpec, dump_spec, infer_shapes, load_spec, needs_projection

CHECKPOINT_FORMAT = "shuffleconv-checkpoint"
CHECKPOINT_VERSION = 1


def param_table(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(name, shape, init kind, fan-in) for every trainable tensor, in layer order."""
    table = []

    def conv(prefix, cin, cout, k, bias):
        table.append((f"{prefix}.weight", (cout, cin, k, k), "he", cin * k * k))
        if bias:
            table.append((f"{prefix}.bias", (cout,), "zeros", 0))

    def bn(prefix, c):
        table.append((f"{prefix}.gamma", (c,), "ones", 0))
        table.append((f"{prefix}.beta", (c,), "zeros", 0))

    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind in ("conv", "shuffle_conv"):
            conv(f"{i}", layer["in"], layer["out"], layer["k"], layer["bias"])
        elif kind == "bn":
            bn(f"{i}", layer["channels"])
        elif kind == "linear":
            table.append((f"{i}.weight", (layer["out"], layer["in"]), "he", layer["in"]))
            if layer["bias"]:
                table.append((f"{i}.bias", (layer["out"],), "zeros", 0))
        elif kind == "bottleneck":
            cin, mid, cout = layer["in"], layer["mid"], layer["out"]
            with_bn = layer.get("bn", True)
            for name, a, b, k in (("conv1", cin, mid, 1), ("conv2", mid, mid, 3), ("conv3", mid, cout, 1)):
                conv(f"{i}.{name}", a, b, k, not with_bn)
                if with_bn:
                    bn(f"{i}.{name}.bn", b)
            if needs_projection(layer):
                conv(f"{i}.proj", cin, cout, 1, not with_bn)
                if with_bn:
                    bn(f"{i}.proj.bn", cout)
    return table


def bn_names(spec: ModelSpec) -> list[tuple[str, int]]:
    return [(name[: -len(".gamma")], shape[0]) for name, shape, _, _ in param_table(spec)
            if name.endswith(".gamma")]


class Model:
    """Parameters plus a forward pass that interprets a ModelSpec layer by layer."""

    def __init__(self, spec: ModelSpec, seed: int | None = 0, params=None, buffers=None, dtype=None):
        infer_shapes(spec)
        self.spec = spec
        dtype = dtype or T.get_default_dtype()
        table = param_table(spec)
        if params is None:
            rng = np.random.default_rng(seed) if seed is not None else None
            params = {}
            for name, shape, init, fan_in in table:
                if init == "he" and rng is not None:
                    data = rng.standard_normal(shape).astype(dtype) * dtype(math.sqrt(2.0 / fan_in))
                elif init == "ones":
                    data = np.ones(shape, dtype=dtype)
                else:
                    data = np.zeros(shape, dtype=dtype)
                params[name] = T.Tensor(data, requires_grad=True, name=name)
        else:
            expected = {name: shape for name, shape, _, _ in table}
            got = {name: tuple(p.shape) for name, p in params.items()}
            if expected != got:
                missing = sorted(set(expected) ^ set(got))
                raise ValueError(f"parameter table does not match spec {spec.name}: {missing[:5]}")
        self.params: dict[str, T.Tensor] = params
        if buffers is None:
            buffers = {name: T.BatchNormState.fresh(c, dtype) for name, c in bn_names(spec)}
        self.buffers: dict[str, T.BatchNormState] = buffers
        self.has_shuffle = any(
            layer.kind == "shuffle_conv" or (layer.kind == "bottleneck" and layer.get("shuffle"))
            for layer in spec.layers)

    def with_spec(self, spec: ModelSpec) -> "Model":
        """A view of the same parameters under another (shape-compatible) spec."""
        return Model(spec, params=self.params, buffers=self.buffers)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- forward ---------------------------------------------------------------------------

    def __call__(self, x, training: bool = False, stream: ShuffleStream | None = None) -> T.Tensor:
        return self.forward(x, training, stream)

    def forward(self, x, training: bool = False, stream: ShuffleStream | None = None) -> T.Tensor:
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=next(iter(self.params.values())).data.dtype)
                         if self.params else x)
        if self.has_shuffle:
            if stream is None:
                raise ValueError(f"{self.spec.name} contains shuffle layers; pass a ShuffleStream")
            stream.next_step()
        p = self.params
        for i, layer in enumerate(self.spec.layers):
            kind = layer.kind
            if kind == "conv":
                x = T.conv2d(x, p[f"{i}.weight"], p.get(f"{i}.bias"), layer["stride"], layer["pad"])
            elif kind == "shuffle_conv":
                perm = draw_permutation(layer["mechanism"], x.shape[1:], stream.rng(i), layer["patch"] or None)
                x = T.conv2d(permute(x, perm), p[f"{i}.weight"], p.get(f"{i}.bias"),
                             layer["stride"], layer["pad"])
            elif kind == "bn":
                x = T.batch_norm(x, p[f"{i}.gamma"], p[f"{i}.beta"], self.buffers[f"{i}"], training)
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "maxpool":
                x = T.max_pool2d(x, layer["k"], layer["stride"], layer.get("pad", 0))
            elif kind == "gap":
                x = T.global_avg_pool(x) if x.ndim == 4 else x
            elif kind == "flatten":
                x = T.flatten(x) if x.ndim != 2 else x
            elif kind == "linear":
                x = T.linear(x, p[f"{i}.weight"], p.get(f"{i}.bias"))
            elif kind == "bottleneck":
                x = self._bottleneck(i, layer, x, training, stream)
            else:
                raise ValueError(f"cannot run layer kind {kind!r}")
        return x

    def _conv_bn(self, prefix, x, stride, pad, with_bn, training, relu=True):
        p = self.params
        x = T.conv2d(x, p[f"{prefix}.weight"], p.get(f"{prefix}.bias"), stride, pad)
        if with_bn:
            x = T.batch_norm(x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], self.buffers[f"{prefix}.bn"],
                             training)
        return T.relu(x) if relu else x

    def _bottleneck(self, i, layer, x, training, stream):
        with_bn = layer.get("bn", True)
        mechanism = layer.get("shuffle")
        patch = layer.get("patch") or None
        h = self._conv_bn(f"{i}.conv1", x, 1, 0, with_bn, training)
        skip = x
        if mechanism:
            h = permute(h, draw_permutation(mechanism, h.shape[1:], stream.rng(i, 0), patch))
            branch = 0 if layer.get("share_skip", True) else 1
            skip = permute(x, draw_permutation(mechanism, x.shape[1:], stream.rng(i, branch), patch))
        h = self._conv_bn(f"{i}.conv2", h, layer["stride"], 1, with_bn, training)
        h = self._conv_bn(f"{i}.conv3", h, 1, 0, with_bn, training, relu=False)
        if needs_projection(layer):
            skip = self._conv_bn(f"{i}.proj", skip, layer["stride"], 0, with_bn, training, relu=False)
        return T.relu(h + skip)

    # --- checkpoints -----------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{name}": t.data for name, t in self.params.items()}
        for name, st in self.buffers.items():
            arrays[f"buffer/{name}/mean"] = st.mean
            arrays[f"buffer/{name}/var"] = st.var
        return arrays

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Model":
        return load_checkpoint(path)


def save_checkpoint(model: Model, path) -> None:
    """Write spec text plus every named tensor (shape and raw values) to an .npz file."""
    buf = io.BytesIO()
    np.savez(buf, __format__=np.array(CHECKPOINT_FORMAT), __version__=np.array(CHECKPOINT_VERSION),
             __spec__=np.array(dump_spec(model.spec)), **model.state_arrays())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z or str(z["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        spec = load_spec(str(z["__spec__"]))
        params, buffers = {}, {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                params[name] = T.Tensor(z[key].copy(), requires_grad=True, name=name)
            elif key.startswith("buffer/") and key.endswith("/mean"):
                name = key[len("buffer/"):-len("/mean")]
                buffers[name] = T.BatchNormState(z[key].copy(), z[f"buffer/{name}/var"].copy())
    return Model(spec, params=params, buffers=buffers)
