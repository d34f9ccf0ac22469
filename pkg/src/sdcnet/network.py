"""Two-path semi-dilated convolutional network (SDCN).

Each path is three SDC blocks with a fixed kernel size (3 for the first
path, 5 for the second). A block runs five parallel semi-dilated
convolutions with dilation vectors [1,1], [1,2], [1,4], [1,8], [1,16],
applies ReLU, concatenates the branches along channels and max-pools 2x2.
Both path outputs are flattened, concatenated, and fed through two ReLU
fully connected layers and a single sigmoid unit.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .sdconv import (
    ConvParams,
    ConvSpec,
    DilationVector,
    conv_nhwc_backward,
    conv_nhwc_forward,
)
from .tensor import (
    DTYPE,
    FormatError,
    ShapeError,
    check_tensor4,
    maxpool2x2,
    maxpool2x2_backward,
    read_sgt,
    write_sgt,
)

DEFAULT_DILATIONS: tuple[DilationVector, ...] = tuple(
    DilationVector(1, d) for d in (1, 2, 4, 8, 16)
)

CHECKPOINT_MAGIC = b"SDCN"
CHECKPOINT_VERSION = 1


class UsageError(RuntimeError):
    """A cache or checkpoint is used against a model it was not produced for."""


@dataclass(frozen=True)
class SdcBlockSpec:
    k: int
    in_channels: int
    filters_per_branch: int
    branch_dilations: tuple[DilationVector, ...] = DEFAULT_DILATIONS
    followed_by_pool: bool = True

    def __post_init__(self) -> None:
        if not self.branch_dilations:
            raise ValueError("an SDC block needs at least one branch")
        dils = tuple(DilationVector(*d) for d in self.branch_dilations)
        object.__setattr__(self, "branch_dilations", dils)

    @property
    def out_channels(self) -> int:
        return len(self.branch_dilations) * self.filters_per_branch

    def conv_specs(self) -> list[ConvSpec]:
        return [
            ConvSpec(self.k, d, self.in_channels, self.filters_per_branch, "same")
            for d in self.branch_dilations
        ]


@dataclass(frozen=True)
class SdcnConfig:
    height: int = 64
    width: int = 256
    n_channels: int = 4
    filters: tuple[int, ...] = (8, 16, 32)
    fc_sizes: tuple[int, ...] = (128, 64)
    kernel_sizes: tuple[int, ...] = (3, 5)
    branch_dilations: tuple[tuple[int, int], ...] = tuple(tuple(d) for d in DEFAULT_DILATIONS)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("filters", "fc_sizes", "kernel_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(
            self, "branch_dilations", tuple(tuple(int(v) for v in d) for d in self.branch_dilations)
        )
        self.validate()

    def validate(self) -> None:
        n_pool = len(self.filters)
        if n_pool != 3:
            raise ValueError(f"each path has three SDC blocks, got {n_pool} filter counts")
        scale = 2**n_pool
        if self.height % scale or self.width % scale:
            raise ValueError(
                f"input {self.height}x{self.width} must be divisible by {scale} (one pool per block)"
            )
        if self.n_channels < 1 or min(self.filters) < 1 or min(self.fc_sizes, default=1) < 1:
            raise ValueError("channel, filter and FC sizes must be positive")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        for d in self.branch_dilations:
            DilationVector(*d).validate()

    @classmethod
    def desk(cls, **overrides: Any) -> "SdcnConfig":
        return replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides: Any) -> "SdcnConfig":
        """Full-size configuration: 100x6000 scalograms of 16 channels."""
        base = cls(height=104, width=6000, n_channels=16, filters=(64, 128, 256), fc_sizes=(1024, 512))
        return replace(base, **overrides)

    def block_specs(self, k: int) -> list[SdcBlockSpec]:
        dils = tuple(DilationVector(*d) for d in self.branch_dilations)
        specs = []
        cin = self.n_channels
        for f in self.filters:
            spec = SdcBlockSpec(k, cin, f, dils)
            specs.append(spec)
            cin = spec.out_channels
        return specs

    @property
    def path_features(self) -> int:
        scale = 2 ** len(self.filters)
        last = len(self.branch_dilations) * self.filters[-1]
        return last * (self.height // scale) * (self.width // scale)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SdcnConfig":
        return cls(**d)


def param_shapes(cfg: SdcnConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in fixed declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for k in cfg.kernel_sizes:
        for bi, block in enumerate(cfg.block_specs(k)):
            for ri in range(len(block.branch_dilations)):
                prefix = f"k{k}.block{bi}.branch{ri}"
                shapes[f"{prefix}.weight"] = (block.filters_per_branch, block.in_channels, k, k)
                shapes[f"{prefix}.bias"] = (block.filters_per_branch,)
    fan_in = cfg.path_features * len(cfg.kernel_sizes)
    for li, units in enumerate(cfg.fc_sizes):
        shapes[f"fc{li}.weight"] = (fan_in, units)
        shapes[f"fc{li}.bias"] = (units,)
        fan_in = units
    shapes["head.weight"] = (fan_in, 1)
    shapes["head.bias"] = (1,)
    return shapes


class SdcnModel:
    """Parameters of a two-path SDCN plus the config that shaped them.

    ``version`` is bumped whenever the parameters are updated in place so a
    forward cache can detect that it went stale.
    """

    def __init__(self, config: SdcnConfig, params: dict[str, np.ndarray], meta: dict | None = None):
        shapes = param_shapes(config)
        if list(params) != list(shapes):
            raise ShapeError("parameter names do not follow the config's declaration order")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.meta = dict(meta or {})
        self.version = 0

    def bump(self) -> None:
        self.version += 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SdcnModel":
        return SdcnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.meta)

    def conv_params(self, k: int, block: int, branch: int) -> ConvParams:
        prefix = f"k{k}.block{block}.branch{branch}"
        return ConvParams(self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])


def init_model(cfg: SdcnConfig, seed: int | None = None) -> SdcnModel:
    """He-normal weights (variance 2/fan_in), zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        std = np.sqrt(2.0 / fan_in)
        params[name] = (rng.standard_normal(shape, dtype=np.float64) * std).astype(DTYPE)
    return SdcnModel(cfg, params)


# --- SDC block ---------------------------------------------------------------
#
# Internally activations are channels-last (B, H, W, C) so every branch
# convolution is a tall-skinny GEMM; the public entry points below take and
# return (B, C, H, W).


@dataclass
class BlockCache:
    x: np.ndarray  # block input, channels-last
    activated: np.ndarray  # ReLU output of the concatenated branches, pre-pool
    pool_idx: np.ndarray


def _block_forward(
    x: np.ndarray, spec: SdcBlockSpec, params: list[ConvParams]
) -> tuple[np.ndarray, BlockCache]:
    b, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"SDC block input needs even spatial dims, got {(h, w)}")
    if len(params) != len(spec.branch_dilations):
        raise ShapeError(f"{len(params)} parameter sets for {len(spec.branch_dilations)} branches")
    f = spec.filters_per_branch
    cat = np.empty((b, h, w, spec.out_channels), dtype=x.dtype)
    for r, (conv, p) in enumerate(zip(spec.conv_specs(), params)):
        z = conv_nhwc_forward(x, p.weights, p.bias, conv.dilation, conv.pads)
        np.maximum(z, 0, out=cat[..., r * f : (r + 1) * f])
    if not spec.followed_by_pool:
        return cat, BlockCache(x, cat, np.empty(0, dtype=np.int64))
    out, idx = maxpool2x2(cat, channels_last=True)
    return out, BlockCache(x, cat, idx)


def _block_backward(
    cache: BlockCache,
    spec: SdcBlockSpec,
    params: list[ConvParams],
    grad_out: np.ndarray,
    need_input_grad: bool,
) -> tuple[np.ndarray | None, list[tuple[np.ndarray, np.ndarray]]]:
    if spec.followed_by_pool:
        g = maxpool2x2_backward(grad_out, cache.pool_idx, cache.activated.shape, channels_last=True)
    else:
        g = grad_out.copy()
    g *= cache.activated > 0
    f = spec.filters_per_branch
    grad_x = np.zeros_like(cache.x) if need_input_grad else None
    grads = []
    for r, (conv, p) in enumerate(zip(spec.conv_specs(), params)):
        gx, gw, gb = conv_nhwc_backward(
            cache.x, p.weights, conv.dilation, conv.pads, g[..., r * f : (r + 1) * f], need_input_grad
        )
        if gx is not None:
            grad_x += gx
        grads.append((gw, gb))
    return grad_x, grads


def sdc_block_forward(
    x: np.ndarray, spec: SdcBlockSpec, params: list[ConvParams]
) -> tuple[np.ndarray, BlockCache]:
    """Five same-padded branches -> ReLU -> channel concat -> 2x2 max-pool.

    Output channels are grouped by branch in ``spec.branch_dilations`` order.
    """
    check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"block expects {spec.in_channels} channels, got {x.shape[1]}")
    out, cache = _block_forward(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), spec, params)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def sdc_block_backward(
    cache: BlockCache,
    spec: SdcBlockSpec,
    params: list[ConvParams],
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, list[tuple[np.ndarray, np.ndarray]]]:
    gx, grads = _block_backward(
        cache, spec, params, np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)), need_input_grad
    )
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return gx, grads


# --- full model --------------------------------------------------------------


@dataclass
class ForwardCache:
    model_id: int
    version: int
    batch: int
    block_caches: dict[int, list[BlockCache]] = field(default_factory=dict)
    fc_inputs: list[np.ndarray] = field(default_factory=list)
    fc_preact: list[np.ndarray] = field(default_factory=list)
    probs: np.ndarray | None = None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    p = np.empty_like(z)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    p[~pos] = ez / (1.0 + ez)
    # Keep the output inside the open interval even when float64 saturates.
    return np.clip(p, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def model_forward(x: np.ndarray, model: SdcnModel) -> tuple[np.ndarray, ForwardCache]:
    """Class-1 probabilities (float64, shape (B,)) for a batch of scalograms."""
    cfg = model.config
    check_tensor4(x)
    if x.shape[1:] != (cfg.n_channels, cfg.height, cfg.width):
        raise ShapeError(
            f"input {x.shape[1:]} does not match config {(cfg.n_channels, cfg.height, cfg.width)}"
        )
    dtype = model.params["head.weight"].dtype
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)
    cache = ForwardCache(id(model), model.version, x.shape[0])
    feats = []
    for k in cfg.kernel_sizes:
        h = x
        caches = []
        for bi, spec in enumerate(cfg.block_specs(k)):
            params = [model.conv_params(k, bi, r) for r in range(len(spec.branch_dilations))]
            h, bc = _block_forward(h, spec, params)
            caches.append(bc)
        cache.block_caches[k] = caches
        # Flatten in (C, H, W) order so FC weights index a row-major Tensor4.
        feats.append(h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1))
    a = np.concatenate(feats, axis=1)
    for li in range(len(cfg.fc_sizes)):
        cache.fc_inputs.append(a)
        z = a @ model.params[f"fc{li}.weight"] + model.params[f"fc{li}.bias"]
        cache.fc_preact.append(z)
        a = np.maximum(z, 0)
    cache.fc_inputs.append(a)
    logit = (a @ model.params["head.weight"] + model.params["head.bias"])[:, 0]
    probs = _sigmoid(logit.astype(np.float64))
    cache.probs = probs
    return probs, cache


def model_backward(
    cache: ForwardCache, grad_probs: np.ndarray, model: SdcnModel
) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(grad_probs * probs)``, keyed like ``model.params``."""
    if cache.model_id != id(model) or cache.version != model.version or cache.probs is None:
        raise UsageError("forward cache does not belong to this model state; rerun model_forward")
    grad_probs = np.asarray(grad_probs, dtype=np.float64)
    if grad_probs.shape != (cache.batch,):
        raise ShapeError(f"grad_probs has shape {grad_probs.shape}, expected ({cache.batch},)")
    cfg = model.config
    dtype = model.params["head.weight"].dtype
    grads: dict[str, np.ndarray] = {}

    p = cache.probs
    g = (grad_probs * p * (1.0 - p)).astype(dtype)[:, None]
    a = cache.fc_inputs[-1]
    grads["head.weight"] = a.T @ g
    grads["head.bias"] = g.sum(axis=0)
    g = g @ model.params["head.weight"].T
    for li in reversed(range(len(cfg.fc_sizes))):
        g = g * (cache.fc_preact[li] > 0)
        a = cache.fc_inputs[li]
        grads[f"fc{li}.weight"] = a.T @ g
        grads[f"fc{li}.bias"] = g.sum(axis=0)
        g = g @ model.params[f"fc{li}.weight"].T

    n_feat = cfg.path_features
    for pi, k in enumerate(cfg.kernel_sizes):
        specs = cfg.block_specs(k)
        b, h, w, c = cache.block_caches[k][-1].activated.shape
        gh = g[:, pi * n_feat : (pi + 1) * n_feat].reshape(b, c, h // 2, w // 2)
        gh = np.ascontiguousarray(gh.transpose(0, 2, 3, 1))
        for bi in reversed(range(len(specs))):
            spec = specs[bi]
            params = [model.conv_params(k, bi, r) for r in range(len(spec.branch_dilations))]
            gh, branch_grads = _block_backward(
                cache.block_caches[k][bi], spec, params, gh, need_input_grad=bi > 0
            )
            for r, (gw, gb) in enumerate(branch_grads):
                grads[f"k{k}.block{bi}.branch{r}.weight"] = gw
                grads[f"k{k}.block{bi}.branch{r}.bias"] = gb
    return {name: grads[name].reshape(model.params[name].shape) for name in model.params}


def predict(model: SdcnModel, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Probabilities for every row of ``x``, computed in fixed-size batches."""
    out = [model_forward(x[i : i + batch_size], model)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(model: SdcnModel, path: str | os.PathLike) -> None:
    header = json.dumps(
        {"config": model.config.to_dict(), "params": list(model.params), "meta": model.meta},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for arr in model.params.values():
        write_sgt(buf, arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> SdcnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    fh = io.BytesIO(data)
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{os.fspath(path)} is not an SDCN checkpoint")
    head = fh.read(8)
    if len(head) != 8:
        raise FormatError("truncated checkpoint header")
    version, n = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated checkpoint config block")
    try:
        header = json.loads(raw)
        cfg = SdcnConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint config block: {exc}") from exc
    shapes = param_shapes(cfg)
    if header.get("params") != list(shapes):
        raise FormatError("checkpoint parameter list does not match its config")
    params = {}
    for name, shape in shapes.items():
        arr = read_sgt(fh)
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{name}: stored {arr.shape}, expected {shape}")
        params[name] = arr.reshape(shape)
    if fh.read(1):
        raise FormatError("trailing bytes after last parameter tensor")
    return SdcnModel(cfg, params, header.get("meta"))
