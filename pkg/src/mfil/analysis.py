"""Effective receptive field, input saliency, and the gradient-check harness."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, VariantConfig, build
from .reference import central_difference
from .tensor import Tape, Tensor, mul, slice_axis, tsum

__all__ = [
    "ErfMap", "erf", "erf_coverage", "saliency", "GradcheckReport",
    "gradcheck_suite", "VERIFICATION_SEEDS", "max_worker_threads",
]

# Fixed seed list used by the gradient suite and the training smoke checks.
VERIFICATION_SEEDS = (1, 2, 3, 4, 5)

# Sensitivity threshold (relative to the map maximum) below which a cell
# counts as outside the effective field; separates float noise from signal.
COVERAGE_THRESHOLD = 1e-6


def max_worker_threads() -> int:
    """Worker cap from MFIL_THREADS; defaults to 1 (fully deterministic)."""
    raw = os.environ.get("MFIL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MFIL_THREADS must be an integer, got {raw!r}")
    return max(1, n)


@dataclass
class ErfMap:
    """Input-sensitivity grid of one output unit; max-normalized."""

    grid: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        if np.any(self.grid < 0):
            raise ValueError("sensitivities must be non-negative")
        if self.normalized and self.grid.size and self.grid.max() > 0:
            assert abs(float(self.grid.max()) - 1.0) < 1e-12

    def coverage(self, threshold: float = COVERAGE_THRESHOLD) -> float:
        peak = self.grid.max() if not self.normalized else 1.0
        if peak == 0:
            return 0.0
        return float(np.mean(self.grid > threshold * peak))


def _erf_single(model, input_size: int, stage: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dtype = getattr(model, "dtype", "f32")
    x = Tensor(rng.standard_normal((1, 3, input_size, input_size)),
               dtype=dtype, grad_enabled=True)
    with Tape() as tape:
        feats = model.forward_features(x)
        fmap = feats[stage]
        _, _, h, w = fmap.shape
        center = slice_axis(slice_axis(fmap, 2, h // 2, h // 2 + 1),
                            3, w // 2, w // 2 + 1)
        loss = tsum(center)
        grads = tape.gradients(loss, [x])
    return np.abs(grads[x].data[0]).sum(axis=0)


def erf(model, input_size: int, stage: int = 3, samples: int = 16,
        seed: int = 0) -> ErfMap:
    """Average |d(center activation at stage)/d(input)| over random inputs.

    The probed unit is the spatial center of the chosen stage output, summed
    over channels; the per-pixel sensitivity is reduced (summed) over the
    three input channels, averaged over ``samples`` standard-normal inputs,
    and normalized to a max of one. Sample accumulation is ordered, so the
    result is identical for any worker count.
    """
    n_feats = len(model.forward_features(
        Tensor(np.zeros((1, 3, input_size, input_size)),
               dtype=getattr(model, "dtype", "f32"))))
    if not (0 <= stage < n_feats):
        raise ValueError(f"stage {stage} out of range [0, {n_feats})")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    seeds = [seed + i for i in range(samples)]
    workers = min(max_worker_threads(), samples)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(
                lambda s: _erf_single(model, input_size, stage, s), seeds))
    else:
        maps = [_erf_single(model, input_size, stage, s) for s in seeds]
    acc = np.zeros((input_size, input_size), dtype=np.float64)
    for m in maps:  # fixed order regardless of completion order
        acc += m
    acc /= samples
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return ErfMap(acc, normalized=True)


def erf_coverage(model, input_size: int, stage: int = 3, samples: int = 16,
                 seed: int = 0,
                 threshold: float = COVERAGE_THRESHOLD) -> float:
    return erf(model, input_size, stage, samples, seed).coverage(threshold)


def saliency(model: Backbone, image: Tensor, class_index: int) -> np.ndarray:
    """|d logit[class] / d input| reduced over channels; non-negative [H, W]."""
    if image.data.ndim == 3:
        image = Tensor(image.data[None], dtype=image.dtype)
    n_classes = model.config.num_classes
    if not (0 <= class_index < n_classes):
        raise IndexError(
            f"class index {class_index} out of range [0, {n_classes})")
    x = Tensor(image.data, dtype=image.dtype, grad_enabled=True)
    with Tape() as tape:
        logits = model.forward(x)
        score = tsum(slice_axis(logits, 1, class_index, class_index + 1))
        grads = tape.gradients(score, [x])
    return np.abs(grads[x].data[0]).sum(axis=0)


# ---------------------------------------------------------------------------
# Gradient checking over the full parameter registry

@dataclass
class GradcheckReport:
    """Per-parameter-group comparison of analytic and numeric gradients."""

    seed: int
    tolerance: float
    entries: dict[str, float] = field(default_factory=dict)
    grad_norms: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def groups(self):
        return set(self.entries)

    def lines(self):
        out = [f"gradcheck.seed: {self.seed}",
               f"gradcheck.groups: {len(self.entries)}",
               f"gradcheck.passed: {self.passed}"]
        worst = sorted(self.entries.items(), key=lambda kv: -kv[1])[:5]
        for name, err in worst:
            out.append(f"gradcheck.worst[{name}]: {err:.3e}")
        for name in self.failures:
            out.append(
                f"gradcheck.FAILED[{name}]: {self.entries[name]:.3e}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def _grad_error(analytic: float, numeric: float, atol: float) -> float:
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def gradcheck_suite(config: VariantConfig, seed: int,
                    input_size: int = 32, elements_per_group: int = 2,
                    h: float = 1e-4, tolerance: float = 1e-4,
                    atol: float = 1e-9) -> GradcheckReport:
    """Check every learnable parameter group against central differences.

    Builds the model in f64, takes a fixed random input and a fixed random
    linear readout of the logits as the scalar loss, then compares the taped
    gradient with a fourth-order central difference at step ``h`` at the
    largest-gradient element of each group plus ``elements_per_group - 1``
    seeded-random elements. Differences below ``atol`` (finite-difference
    roundoff floor) pass regardless of relative size.
    """
    rng = np.random.default_rng(seed)
    model = build(config, seed=seed, dtype="f64")
    params = model.parameters()
    x = Tensor(rng.standard_normal((1, 3, input_size, input_size)),
               dtype="f64")
    readout = rng.standard_normal((1, config.num_classes))

    def loss_value() -> float:
        logits = model.forward(x)
        return float(np.sum(logits.data * readout))

    with Tape() as tape:
        logits = model.forward(x)
        loss = tsum(mul(logits, Tensor(readout)))
        grads = tape.gradients(loss, list(params.values()))

    report = GradcheckReport(seed=seed, tolerance=tolerance)
    for name, p in params.items():
        g = grads[p].data
        report.grad_norms[name] = float(np.linalg.norm(g))
        flat_idx = [int(np.argmax(np.abs(g)))]
        if p.size > 1:
            extra = rng.integers(0, p.size, size=elements_per_group - 1)
            flat_idx.extend(int(i) for i in extra)
        worst = 0.0
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in dict.fromkeys(flat_idx):
            numeric = central_difference(loss_value, flat, i, h)
            worst = max(worst, _grad_error(float(gflat[i]), numeric, atol))
        report.entries[name] = worst
        if worst > tolerance:
            report.failures.append(name)
    return report
