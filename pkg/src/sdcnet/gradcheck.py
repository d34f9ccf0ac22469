"""Self-checks run by ``sdcnet gradcheck``.

Each check compares a fast-path result against something computed a
different way: central finite differences for gradients, scipy correlation
with a zero-expanded kernel for the forward pass, and the analytic
receptive-field formula for gradient support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import SdcnConfig, init_model, model_backward, model_forward
from .sdconv import (
    ConvParams,
    ConvSpec,
    effective_tap_offsets,
    expand_kernel,
    receptive_field,
    sdconv_backward,
    sdconv_forward,
    standard_conv2d,
)

TINY_MODEL = dict(height=16, width=16, n_channels=2, filters=(2, 4, 8), fc_sizes=(16, 8))


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3g} (tol {self.tolerance:g})"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def central_difference(
    f: Callable[[], float], arr: np.ndarray, flat_idx: np.ndarray, step: float
) -> np.ndarray:
    """d f / d arr.flat[i] for each i, perturbing ``arr`` in place and restoring it.

    The step actually applied is re-measured after rounding to ``arr.dtype``.
    """
    flat = arr.reshape(-1)
    out = np.empty(len(flat_idx))
    for n, i in enumerate(flat_idx):
        orig = flat[i]
        flat[i] = orig + step
        hi_x = float(flat[i])
        f_hi = f()
        flat[i] = orig - step
        lo_x = float(flat[i])
        f_lo = f()
        flat[i] = orig
        out[n] = (f_hi - f_lo) / (hi_x - lo_x)
    return out


def random_conv_case(rng: np.random.Generator, dtype=np.float32, padding="same"):
    k = int(rng.choice([3, 5]))
    d = (int(rng.choice([1, 2])), int(rng.choice([1, 2, 4, 8, 16])))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    rf_h, rf_w = receptive_field(k, d)
    h = int(rng.integers(max(3, rf_h if padding == "valid" else 3), rf_h + 6))
    w = int(rng.integers(max(3, rf_w if padding == "valid" else 3), rf_w + 8))
    b = int(rng.integers(1, 3))
    spec = ConvSpec(k, d, cin, cout, padding)
    scale = 1.0 / np.sqrt(cin * k * k)
    params = ConvParams(
        (rng.standard_normal((cout, cin, k, k)) * scale).astype(dtype),
        rng.standard_normal(cout).astype(dtype),
    )
    x = rng.standard_normal((b, cin, h, w)).astype(dtype)
    return x, spec, params


def check_oracle_equivalence(n_cases: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, spec, params = random_conv_case(rng)
        fast = sdconv_forward(x, spec, params)
        ref = standard_conv2d(x, expand_kernel(params, spec.dilation), spec.padding)
        worst = max(worst, float(np.abs(fast - ref).max()))
    return CheckResult(f"forward == zero-expanded standard conv ({n_cases} cases, max |diff|)", worst, 1e-5)


def check_sdconv_gradients(
    n_cases: int = 20, seed: int = 0, dtype=np.float32, n_probe: int = 12
) -> CheckResult:
    rng = np.random.default_rng(seed)
    tol, step = (1e-3, 1e-2) if dtype == np.float32 else (1e-6, 1e-4)
    worst = 0.0
    for _ in range(n_cases):
        x, spec, params = random_conv_case(rng, dtype)
        proj = rng.standard_normal(sdconv_forward(x, spec, params).shape)

        def loss() -> float:
            return float(np.sum(sdconv_forward(x, spec, params).astype(np.float64) * proj))

        gx, gw, gb = sdconv_backward(x, spec, params, proj.astype(dtype))
        for arr, grad in ((x, gx), (params.weights, gw), (params.bias, gb)):
            idx = rng.choice(arr.size, size=min(n_probe, arr.size), replace=False)
            num = central_difference(loss, arr, idx, step)
            worst = max(worst, relative_error(grad.reshape(-1)[idx], num))
    name = f"sdconv backward vs finite differences ({np.dtype(dtype).name}, {n_cases} cases)"
    return CheckResult(name, worst, tol)


def check_receptive_field_probe(n_cases: int = 20, seed: int = 0) -> CheckResult:
    """Count cases whose gradient support differs from the predicted tap set."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_cases):
        x, spec, params = random_conv_case(rng, np.float64, padding="valid")
        out = sdconv_forward(x, spec, params)
        g = np.zeros_like(out)
        g[0, 0, 0, 0] = 1.0
        gx, _, _ = sdconv_backward(x, spec, params, g)
        support = {tuple(p) for p in np.argwhere(np.any(gx[0] != 0, axis=0))}
        taps = set(effective_tap_offsets(spec))
        ys, xs = zip(*support) if support else ((), ())
        box = (max(ys) - min(ys) + 1, max(xs) - min(xs) + 1) if support else (0, 0)
        if support != taps or box != receptive_field(spec.k, spec.dilation):
            mismatches += 1
    return CheckResult(f"gradient support == receptive field ({n_cases} cases, mismatches)", mismatches, 0)


def check_model_gradients(seed: int = 0, n_probe: int = 50) -> CheckResult:
    cfg = SdcnConfig(**TINY_MODEL, seed=seed)
    model = init_model(cfg)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p[...] = (0.1 * rng.standard_normal(p.shape)).astype(p.dtype)
    x = rng.standard_normal((2, cfg.n_channels, cfg.height, cfg.width)).astype(np.float32)
    upstream = rng.standard_normal(2)

    def loss() -> float:
        return float(np.dot(model_forward(x, model)[0], upstream))

    _, cache = model_forward(x, model)
    grads = model_backward(cache, upstream, model)
    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=n_probe, replace=False)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        arr = model.params[names[pi]]
        numeric.append(central_difference(loss, arr, np.array([local]), 1e-3)[0])
        analytic.append(grads[names[pi]].reshape(-1)[local])
    return CheckResult(f"tiny SDCN backward vs finite differences ({n_probe} params)", relative_error(analytic, numeric), 1e-2)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_oracle_equivalence(50, seed),
        check_sdconv_gradients(20, seed, np.float32),
        check_sdconv_gradients(20, seed, np.float64),
        check_receptive_field_probe(20, seed),
        check_model_gradients(seed),
    ]
