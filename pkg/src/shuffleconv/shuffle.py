"""Spatial, patch-wise and channel-wise shuffles as differentiable layers.

Permutations come from a counter-based generator: every random word is a
pure hash of ``(seed, phase, step, layer, branch, kind, unit, position)``, so
a permutation never depends on how many other permutations were drawn
before it, on which platform, or in which thread.  Each unit (a channel, a
channel x patch grid, or the channel axis) gets its own Fisher-Yates draw.

Patch-wise and full spatial shuffle share a single builder; a spatial
shuffle is a patch shuffle whose one patch covers the whole map.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor, _result, conv2d

PHASES = {"train": 0x7A11, "eval": 0xE7A1}
_KIND_TAGS = {"spatial": 0x5A, "channel": 0xC4}
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    """SplitMix64 finalizer on uint64 scalars or arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _fold(key, value):
    return _mix(np.asarray(key, dtype=np.uint64) ^ np.asarray(value, dtype=np.int64).astype(np.uint64))


@dataclass(frozen=True)
class ShuffleRng:
    """Identifies one random stream: a seed plus (phase, step, layer, branch)."""

    seed: int
    phase: str = "train"
    step: int = 0
    layer: int = 0
    branch: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {sorted(PHASES)}, got {self.phase!r}")

    @property
    def stream_id(self) -> tuple:
        return (self.phase, self.step, self.layer, self.branch)

    def base_key(self, kind: str) -> np.uint64:
        key = _mix(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF))
        for coord in (PHASES[self.phase], self.step, self.layer, self.branch, _KIND_TAGS[kind]):
            key = _fold(key, coord)
        return key

    def at_layer(self, layer: int, branch: int = 0) -> "ShuffleRng":
        return replace(self, layer=layer, branch=branch)

    def next_step(self) -> "ShuffleRng":
        return replace(self, step=self.step + 1)


class ShuffleStream:
    """Per-run stream owner: hands out a fresh step for every forward pass."""

    def __init__(self, seed: int, phase: str = "train"):
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {sorted(PHASES)}, got {phase!r}")
        self.seed = seed
        self.phase = phase
        self.step = 0

    def next_step(self) -> int:
        self.step += 1
        return self.step

    def rng(self, layer: int, branch: int = 0) -> ShuffleRng:
        return ShuffleRng(self.seed, self.phase, self.step, layer, branch)


def fisher_yates(keys: np.ndarray, n: int) -> np.ndarray:
    """One uniform permutation of range(n) per key, shape (len(keys), n)."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    perm = np.tile(np.arange(n, dtype=np.int64), (keys.size, 1))
    if n < 2 or keys.size == 0:
        return perm
    pos = np.arange(n - 1, 0, -1, dtype=np.int64)
    words = _mix(keys[:, None] ^ _mix(pos.astype(np.uint64))[None, :])
    unit = (words >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    picks = (unit * (pos + 1)).astype(np.int64)
    rows = np.arange(keys.size)
    for col, i in enumerate(pos):
        j = picks[:, col]
        held = perm[rows, i]
        perm[rows, i] = perm[rows, j]
        perm[rows, j] = held
    return perm


@dataclass(frozen=True, eq=False)
class PermutationSpec:
    """Index maps of one shuffle: ``out[..., q] = x[..., index[q]]``.

    For spatial kinds ``index`` has shape (C, H*W) over flattened positions;
    for the channel kind it has shape (C,).
    """

    kind: str
    index: np.ndarray
    inverse: np.ndarray
    patch: tuple[int, int] | None = None

    @classmethod
    def from_index(cls, kind: str, index: np.ndarray, patch=None) -> "PermutationSpec":
        index = np.asarray(index, dtype=np.int64)
        inverse = np.empty_like(index)
        np.put_along_axis(inverse, index, np.broadcast_to(np.arange(index.shape[-1]), index.shape), axis=-1)
        return cls(kind, index, inverse, patch)

    @property
    def maps(self) -> np.ndarray:
        return self.index.reshape(-1, self.index.shape[-1])

    def is_bijection(self) -> bool:
        n = self.index.shape[-1]
        return bool(np.array_equal(np.sort(self.maps, axis=1), np.broadcast_to(np.arange(n), self.maps.shape)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return _gather(x, self.kind, self.index)

    def apply_inverse(self, g: np.ndarray) -> np.ndarray:
        return _gather(g, self.kind, self.inverse)


def _gather(x: np.ndarray, kind: str, index: np.ndarray) -> np.ndarray:
    if kind == "channel":
        return x[:, index]
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    return flat[:, np.arange(c)[:, None], index].reshape(n, c, h, w)


def _grid_positions(h: int, w: int, ph: int, pw: int):
    """Yield (grid ids, flat positions) for every group of equally sized grids."""
    rows = list(range(0, h, ph))
    cols = list(range(0, w, pw))
    ncols = len(cols)
    groups: dict[tuple[int, int], tuple[list[int], list[np.ndarray]]] = {}
    for gr, r0 in enumerate(rows):
        for gc, c0 in enumerate(cols):
            gh, gw = min(ph, h - r0), min(pw, w - c0)
            rr, cc = np.meshgrid(np.arange(r0, r0 + gh), np.arange(c0, c0 + gw), indexing="ij")
            ids, pos = groups.setdefault((gh, gw), ([], []))
            ids.append(gr * ncols + gc)
            pos.append((rr * w + cc).reshape(-1))
    for ids, pos in groups.values():
        yield np.asarray(ids, dtype=np.int64), np.stack(pos)


def _as_patch(patch) -> tuple[int, int]:
    if isinstance(patch, (tuple, list)):
        ph, pw = (int(p) for p in patch)
    else:
        ph = pw = int(patch)
    if ph <= 0 or pw <= 0:
        raise ValueError(f"patch size must be positive, got {patch}")
    return ph, pw


def spatial_permutation(shape, patch, rng: ShuffleRng) -> PermutationSpec:
    """Per-(channel, grid) permutations of a C x H x W map tiled by ``patch``.

    Trailing grids that do not fit a full patch are shuffled within their
    own smaller extent.
    """
    c, h, w = shape[-3:]
    ph, pw = _as_patch(patch)
    ph, pw = min(ph, h), min(pw, w)
    base = rng.base_key("spatial")
    index = np.empty((c, h * w), dtype=np.int64)
    chan_keys = _fold(base, np.arange(c))
    for grid_ids, pos in _grid_positions(h, w, ph, pw):
        keys = _fold(chan_keys[:, None], grid_ids[None, :])  # (C, G)
        perms = fisher_yates(keys.reshape(-1), pos.shape[1]).reshape(c, len(grid_ids), -1)
        src = np.take_along_axis(np.broadcast_to(pos, perms.shape), perms, axis=2)
        index[:, pos.reshape(-1)] = src.reshape(c, -1)
    return PermutationSpec.from_index("spatial", index, (ph, pw))


def channel_permutation(channels: int, rng: ShuffleRng) -> PermutationSpec:
    keys = np.asarray([rng.base_key("channel")])
    return PermutationSpec.from_index("channel", fisher_yates(keys, channels)[0])


def permute(x: Tensor, spec: PermutationSpec) -> Tensor:
    """Apply a frozen permutation; the gradient is routed back through its inverse."""
    if x.ndim != 4:
        raise ValueError(f"shuffle input must be N x C x H x W, got rank {x.ndim}")
    n, c, h, w = x.shape
    expected = (c,) if spec.kind == "channel" else (c, h * w)
    if spec.index.shape != expected:
        raise ValueError(f"permutation of shape {spec.index.shape} does not fit input {x.shape}")

    def back(g):
        return (spec.apply_inverse(g),)

    return _result(spec.apply(x.data), (x,), back, f"{spec.kind}_shuffle")


def spatial_shuffle(x: Tensor, rng: ShuffleRng) -> tuple[Tensor, PermutationSpec]:
    return patch_shuffle(x, x.shape[2:], rng)


def patch_shuffle(x: Tensor, patch, rng: ShuffleRng) -> tuple[Tensor, PermutationSpec]:
    spec = spatial_permutation(x.shape[1:], patch, rng)
    return permute(x, spec), spec


def channel_shuffle(x: Tensor, rng: ShuffleRng) -> tuple[Tensor, PermutationSpec]:
    spec = channel_permutation(x.shape[1], rng)
    return permute(x, spec), spec


def parse_mechanism(text: str) -> tuple[str, int | None]:
    """``"spatial"``, ``"channel"``, ``"patch:4"``, ``"gapfc"`` or ``"none"`` -> (name, patch)."""
    text = text.strip().lower().replace("gap_fc", "gapfc")
    if text.startswith("patch"):
        _, _, p = text.partition(":")
        if not p:
            raise ValueError("patch mechanism needs a size, e.g. 'patch:4'")
        size = int(p)
        if size <= 0:
            raise ValueError(f"patch size must be positive, got {size}")
        return "patch", size
    if text not in ("none", "spatial", "channel", "gapfc"):
        raise ValueError(f"unknown mechanism {text!r}")
    return text, None


def draw_permutation(mechanism: str, shape, rng: ShuffleRng, patch: int | None = None) -> PermutationSpec:
    if mechanism == "spatial":
        return spatial_permutation(shape, shape[-2:], rng)
    if mechanism == "patch":
        return spatial_permutation(shape, patch, rng)
    if mechanism == "channel":
        return channel_permutation(shape[-3], rng)
    raise ValueError(f"{mechanism!r} is not a shuffle mechanism")


def shuffle_conv(x: Tensor, mechanism: str, weight: Tensor, bias: Tensor | None = None,
                 stride: int = 1, padding: int = 0, rng: ShuffleRng | None = None,
                 patch: int | None = None, spec: PermutationSpec | None = None) -> Tensor:
    """Shuffle the input with ``mechanism`` and convolve.

    Pass ``spec`` to reuse a frozen permutation instead of drawing from ``rng``.
    """
    if spec is None:
        if rng is None:
            raise ValueError("shuffle_conv needs either an rng or a frozen spec")
        spec = draw_permutation(mechanism, x.shape[1:], rng, patch)
    return conv2d(permute(x, spec), weight, bias, stride, padding)
