"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the tensors in ``inputs`` to a scalar tensor. Every input
    with ``requires_grad`` is checked. The relative error of a coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``. When ``max_coords`` is
    given, a random subset of that many coordinates per input is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tracked = [t for t in inputs if t.requires_grad]
    for t in tracked:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise T.ShapeError(f"gradient_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite function value")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tracked]

    worst = 0.0
    with T.no_grad():
        for t, ga in zip(tracked, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite value while perturbing coordinate {i}")
                num = (fp - fm) / (2 * eps)
                err = abs(ga.reshape(-1)[i] - num) / max(1e-8, abs(num))
                worst = max(worst, err)
    for t in tracked:
        t.grad = None
    return worst


@dataclass
class GradCase:
    """A registered gradient-check instance: ``build(rng) -> (f, inputs)``."""

    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    tol: float = 1e-3
    eps: float = 1e-6
    max_coords: int | None = None


REGISTRY: dict[str, GradCase] = {}


def register(name: str, tol: float = 1e-3, eps: float = 1e-6, max_coords: int | None = None):
    def deco(build):
        REGISTRY[name] = GradCase(name, build, tol, eps, max_coords)
        return build

    return deco


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    tol: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error <= self.tol


def run_cases(names: Sequence[str] | None = None, seed: int = 0) -> list[CaseResult]:
    """Run registered cases at 64-bit precision."""
    from . import gradcases  # noqa: F401 - populates REGISTRY

    selected = list(REGISTRY) if names is None else list(names)
    results = []
    with T.precision(np.float64):
        for name in selected:
            case = REGISTRY[name]
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            try:
                f, inputs = case.build(rng)
                err = gradient_check(f, inputs, eps=case.eps, max_coords=case.max_coords, rng=rng)
                results.append(CaseResult(name, err, case.tol))
            except Exception as exc:  # reported as a failed row
                results.append(CaseResult(name, float("inf"), case.tol, f"{type(exc).__name__}: {exc}"))
    return results
