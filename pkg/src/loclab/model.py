"""Model assembly: background potential, single-site profile, coupling law.

The random operator is H = -d^2/dx^2 + W0(x) + sum_n omega_n f(x - n) with
i.i.d. couplings omega_n drawn from a compactly supported density.  Unit
cells are the intervals [n-1, n); cell n carries the bump f(. - n) and the
background slice g_n(x) = W0(x + n) on [-1, 0].  Everything is carried
around as piecewise-linear tables so integrations downstream are exact in
the potential.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import piecewise
from .piecewise import PiecewiseLinear

__all__ = [
    "BackgroundPotential",
    "SingleSite",
    "CouplingDistribution",
    "Model",
    "ValidationReport",
    "compute_phase_bound",
    "validate_model",
    "sample_couplings",
    "evaluate_full_potential",
    "box_potential",
    "derive_seed",
    "load_model",
    "model_config_hash",
    "reference_model",
    "operator_suite_model",
    "smooth_demo_model",
]

_CDF_POINTS = 2 ** 14


# ---------------------------------------------------------------------------
# background

@dataclass(frozen=True)
class BackgroundPotential:
    """Bounded background W0, stored as a table plus an extension rule.

    ``extension`` is one of "zero", "constant" (edge values continue
    outward) or "periodic" (the table tiles the line with period equal to
    its domain length).  ``sup_bound`` is the declared bound used in the
    phase winding estimate; it may exceed the actual sup norm.
    """

    table: PiecewiseLinear
    extension: str = "zero"
    sup_bound: float | None = None

    def __post_init__(self):
        if self.extension not in ("zero", "constant", "periodic"):
            raise ValueError(f"unknown extension {self.extension!r}")
        if self.sup_bound is None:
            object.__setattr__(self, "sup_bound", self.table.sup_norm())

    def restrict(self, a: float, b: float) -> PiecewiseLinear:
        """Materialize W0 on [a, b] as an explicit table."""
        t = self.table
        lo, hi = t.breaks[0], t.breaks[-1]
        if self.extension == "zero":
            return t.restrict(a, b) if (a < hi and b > lo) else piecewise.constant(0.0, a, b)
        if self.extension == "constant":
            parts = []
            if a < lo:
                parts.append(piecewise.constant(t(lo), a, min(lo, b)))
            if a < hi and b > lo:
                parts.append(t.restrict(max(a, lo), min(b, hi)))
            if b > hi:
                parts.append(piecewise.constant(t.c0[-1] + t.c1[-1] * (hi - t.breaks[-2]),
                                                max(hi, a), b))
            out = parts[0]
            for p in parts[1:]:
                out = out + p
            return out.restrict(a, b)
        period = hi - lo
        k0 = math.floor((a - lo) / period)
        k1 = math.ceil((b - lo) / period)
        out = None
        for k in range(int(k0), int(k1) + 1):
            s = t.shift(k * period)
            out = s if out is None else out + s
        return out.restrict(a, b)

    def cell(self, n: int) -> PiecewiseLinear:
        """Background slice of cell n mapped to [-1, 0]: g_n(x) = W0(x + n)."""
        return self.restrict(n - 1.0, float(n)).shift(-float(n))

    def __call__(self, x):
        return self._eval(x)

    def _eval(self, x):
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = float(self.table.breaks[0]), float(self.table.breaks[-1])
        if self.extension == "zero":
            y = self.table(xv)
        elif self.extension == "constant":
            y = self.table(np.clip(xv, lo, hi))
        else:
            period = hi - lo
            y = self.table(lo + np.mod(xv - lo, period))
        return float(y[0]) if np.isscalar(x) or np.asarray(x).ndim == 0 else y


# ---------------------------------------------------------------------------
# single site

@dataclass(frozen=True)
class SingleSite:
    """Single-site profile f: 0 <= f <= upper on [-1, 0], f >= lower on core,
    f = 0 outside [interval[0], interval[1]], f > 0 a.e. inside it."""

    table: PiecewiseLinear
    interval: tuple[float, float]           # [a, b] within [-1, 0]
    core: tuple[float, float]               # subinterval I where f >= lower
    lower: float
    upper: float

    def __post_init__(self):
        a, b = self.interval
        ca, cb = self.core
        if not (-1.0 <= a < b <= 0.0):
            raise ValueError("support interval must sit inside [-1, 0]")
        if not (a <= ca < cb <= b):
            raise ValueError("core must sit inside the support interval")
        if not (0.0 < self.lower <= self.upper):
            raise ValueError("need 0 < lower <= upper")

    def sup_norm(self) -> float:
        return self.table.sup_norm()

    def shifted(self, n: int) -> PiecewiseLinear:
        return self.table.shift(float(n))

    def __call__(self, x):
        return self.table(x)


# ---------------------------------------------------------------------------
# coupling distribution

def _build_cdf(pdf: PiecewiseLinear, npts: int = _CDF_POINTS):
    lo, hi = float(pdf.breaks[0]), float(pdf.breaks[-1])
    xg = np.linspace(lo, hi, npts + 1)
    cdf = np.empty_like(xg)
    cdf[0] = 0.0
    # exact integral of the table over each subinterval
    for i in range(npts):
        cdf[i + 1] = cdf[i] + pdf.integral(xg[i], xg[i + 1])
    total = cdf[-1]
    if total <= 0:
        raise ValueError("density integrates to zero")
    cdf /= total
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return xg[keep], cdf[keep], total


@dataclass(frozen=True)
class CouplingDistribution:
    """Compactly supported coupling density, tabulated piecewise-linearly.

    Sampling inverts a 2^14-point tabulated CDF with linear interpolation.
    ``bound`` is max(|lo|, |hi|) of the support hull.
    """

    pdf: PiecewiseLinear
    _xg: np.ndarray = field(repr=False, default=None)
    _cdf: np.ndarray = field(repr=False, default=None)
    _total: float = field(repr=False, default=0.0)

    def __post_init__(self):
        if self.pdf.min_value() < -1e-12:
            raise ValueError("density must be nonnegative")
        xg, cdf, total = _build_cdf(self.pdf)
        object.__setattr__(self, "_xg", xg)
        object.__setattr__(self, "_cdf", cdf)
        object.__setattr__(self, "_total", total)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.pdf.breaks[0]), float(self.pdf.breaks[-1])

    @property
    def bound(self) -> float:
        lo, hi = self.support
        return max(abs(lo), abs(hi))

    def normalization(self) -> float:
        """Exact integral of the stored table (should be 1)."""
        return float(self._total)

    def __call__(self, lam):
        return self.pdf(lam)

    def mean(self) -> float:
        """Exact first moment of the stored table (piecewise polynomial)."""
        b, c0, c1 = self.pdf.breaks, self.pdf.c0, self.pdf.c1
        total = 0.0
        for i in range(len(c0)):
            w = b[i + 1] - b[i]
            # int x (c0 + c1 (x - b_i)) dx over the piece
            total += c0[i] * w * (b[i] + w / 2.0) + c1[i] * w * w * (b[i] / 2.0 + w / 3.0)
        return float(total / self._total)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.uniform(0.0, 1.0, size=count)
        return np.interp(u, self._cdf, self._xg)


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class Model:
    """Full operator family description plus the phase winding bound."""

    background: BackgroundPotential
    site: SingleSite
    coupling: CouplingDistribution
    e_max: float
    n_winding: int = 0

    def __post_init__(self):
        if self.e_max <= 0:
            raise ValueError("e_max must be positive")
        n = compute_phase_bound(self.background.sup_bound, self.coupling.bound,
                                self.site.sup_norm(), self.e_max)
        if self.n_winding == 0:
            object.__setattr__(self, "n_winding", n)
        elif self.n_winding < n:
            raise ValueError(f"declared winding bound {self.n_winding} below required {n}")

    @property
    def torus_span(self) -> float:
        return 2.0 * math.pi * self.n_winding


def compute_phase_bound(sup_w0: float, coupling_bound: float, sup_f: float,
                        e_max: float) -> int:
    """Smallest N with 2 + |W0| + M |f| + E_max < N pi.

    The phase velocity obeys |phi'| <= 1 + |1 + q - E| <= that sum, so over
    a unit cell the phase moves by less than N pi and the cell map lives on
    a circle of circumference 2 pi N.
    """
    s = 2.0 + float(sup_w0) + float(coupling_bound) * float(sup_f) + float(e_max)
    return int(math.floor(s / math.pi)) + 1


# ---------------------------------------------------------------------------
# validation

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            tag = "ok " if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}" + (f": {c.detail}" if c.detail else ""))
        return "\n".join(lines)


def validate_model(model: Model, n_grid: int = 10_000) -> ValidationReport:
    """Hypothesis audit; failures are reported, not raised."""
    checks: list[CheckResult] = []
    bg, site, coup = model.background, model.site, model.coupling

    xs = np.linspace(-50.0, 50.0, n_grid)
    w = np.atleast_1d(bg._eval(xs))
    ok = bool(np.all(np.abs(w) <= bg.sup_bound + 1e-12))
    checks.append(CheckResult("background bounded by declared sup", ok,
                              f"max |W0| sampled = {np.abs(w).max():.6g}, declared {bg.sup_bound:.6g}"))

    a, b = site.interval
    fs = np.atleast_1d(site.table(np.linspace(-1.0, 0.0, n_grid)))
    ok = bool(fs.min() >= -1e-12 and fs.max() <= site.upper + 1e-12)
    checks.append(CheckResult("site profile within [0, upper]", ok,
                              f"range [{fs.min():.3g}, {fs.max():.3g}], upper {site.upper:.3g}"))

    out_mass = site.table.abs_integral(-1.0, a) + site.table.abs_integral(b, 0.0)
    checks.append(CheckResult("site vanishes outside its interval", bool(out_mass <= 1e-12),
                              f"stray mass {out_mass:.3g}"))

    ca, cb = site.core
    core_vals = np.atleast_1d(site.table(np.linspace(ca, cb, 512, endpoint=False)[1:]))
    ok = bool(core_vals.min() >= site.lower - 1e-12)
    checks.append(CheckResult("site bounded below on core", ok,
                              f"min on core {core_vals.min():.6g}, lower {site.lower:.6g}"))

    inner = np.atleast_1d(site.table(np.linspace(a, b, 512, endpoint=False)[1:]))
    checks.append(CheckResult("site positive inside interval", bool(inner.min() > 0.0),
                              f"min inside {inner.min():.3g}"))

    norm = coup.normalization()
    checks.append(CheckResult("coupling density normalized", bool(abs(norm - 1.0) <= 1e-8),
                              f"integral = {norm!r}"))

    lo, hi = coup.support
    checks.append(CheckResult("coupling support bounded", bool(coup.bound < math.inf),
                              f"support [{lo:.3g}, {hi:.3g}]"))

    s1 = coup.sample(256, np.random.Generator(np.random.PCG64(1234)))
    s2 = coup.sample(256, np.random.Generator(np.random.PCG64(1234)))
    ok = bool(np.array_equal(s1, s2) and s1.min() >= lo - 1e-12 and s1.max() <= hi + 1e-12)
    checks.append(CheckResult("sampler deterministic and in-support", ok))

    need = compute_phase_bound(bg.sup_bound, coup.bound, site.sup_norm(), model.e_max)
    checks.append(CheckResult("winding bound covers phase velocity", model.n_winding >= need,
                              f"declared {model.n_winding}, required {need}"))
    return ValidationReport(checks)


# ---------------------------------------------------------------------------
# sampling and assembly

def derive_seed(master: int, index: int) -> int:
    """Stable per-task seed (independent of platform and worker layout)."""
    msg = f"{master}:{index}".encode()
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


def sample_couplings(coupling: CouplingDistribution, count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return coupling.sample(count, rng)


def evaluate_full_potential(model: Model, omega: np.ndarray, first_index: int, x):
    """W0(x) + omega_n f(x - n) at points x, cells n in [first_index, ...].

    Cell n is [n-1, n); the right edge of the last cell is folded into it.
    Points outside the covered range raise.
    """
    omega = np.asarray(omega, dtype=float)
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    last = first_index + omega.size - 1
    if xv.min() < first_index - 1 or xv.max() > last:
        raise ValueError("point outside the cells covered by omega")
    n = np.floor(xv).astype(int) + 1
    n = np.minimum(n, last)
    w = np.atleast_1d(model.background._eval(xv))
    fvals = np.atleast_1d(model.site.table(xv - n))
    out = w + omega[n - first_index] * fvals
    return float(out[0]) if np.asarray(x).ndim == 0 else out


def box_potential(model: Model, omega: np.ndarray, L: int):
    """(q, F) on [-L, L]: q = W0 + sum omega_n f(. - n), F = unweighted tile of f.

    omega has length 2L, cells n = -L+1 .. L.  F is the accumulator weight
    whose per-cell integrals give int f_n u^2 by differencing at sites.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.size != 2 * L:
        raise ValueError(f"omega must have length {2 * L}")
    q = model.background.restrict(-float(L), float(L))
    q = q + model.site.table.tile(-L + 1, L, weights=omega)
    f_tile = model.site.table.tile(-L + 1, L)
    return q, f_tile


# ---------------------------------------------------------------------------
# presets and config driving

def _pl_from_cfg(d: dict) -> PiecewiseLinear:
    return piecewise.from_samples(np.asarray(d["x"], float), np.asarray(d["y"], float))


def _background_from_cfg(d: dict) -> BackgroundPotential:
    kind = d.get("kind", "zero")
    if kind == "zero":
        span = float(d.get("span", 64.0))
        return BackgroundPotential(piecewise.constant(0.0, -span, span),
                                   "constant", sup_bound=float(d.get("sup_bound", 0.0)))
    if kind == "constant":
        v = float(d["value"])
        return BackgroundPotential(piecewise.constant(v, -1.0, 0.0), "constant",
                                   sup_bound=float(d.get("sup_bound", abs(v))))
    if kind == "table":
        return BackgroundPotential(_pl_from_cfg(d), d.get("extension", "zero"),
                                   sup_bound=d.get("sup_bound"))
    raise ValueError(f"unknown background kind {kind!r}")


def _cosine_bump(a: float, b: float, height: float, n: int = 257) -> PiecewiseLinear:
    xs = np.linspace(a, b, n)
    ys = height * 0.5 * (1.0 - np.cos(2.0 * math.pi * (xs - a) / (b - a)))
    ys[0] = 0.0
    ys[-1] = 0.0
    return piecewise.from_samples(xs, ys)


def _site_from_cfg(d: dict) -> SingleSite:
    kind = d.get("kind", "indicator")
    if kind == "indicator":
        h = float(d.get("amplitude", 1.0))
        a, b = d.get("interval", (-1.0, 0.0))
        return SingleSite(piecewise.constant(h, a, b), (a, b), (a, b), h, h)
    if kind == "bump":
        h = float(d.get("amplitude", 1.0))
        a, b = d.get("interval", (-0.9, -0.1))
        tab = _cosine_bump(a, b, h)
        qa, qb = a + 0.25 * (b - a), b - 0.25 * (b - a)
        return SingleSite(tab, (a, b), (qa, qb), 0.5 * h, h)
    if kind == "table":
        tab = _pl_from_cfg(d)
        a, b = d["interval"]
        ca, cb = d["core"]
        return SingleSite(tab, (float(a), float(b)), (float(ca), float(cb)),
                          float(d["lower"]), float(d["upper"]))
    raise ValueError(f"unknown site kind {kind!r}")


def _coupling_from_cfg(d: dict) -> CouplingDistribution:
    kind = d.get("kind", "uniform")
    if kind == "uniform":
        lo, hi = float(d.get("lo", 0.0)), float(d.get("hi", 1.0))
        return CouplingDistribution(piecewise.constant(1.0 / (hi - lo), lo, hi))
    if kind == "raised_cosine":
        w = float(d.get("halfwidth", 1.0))
        center = float(d.get("center", 0.0))
        xs = np.linspace(center - w, center + w, 1025)
        ys = (1.0 + np.cos(math.pi * (xs - center) / w)) / (2.0 * w)
        ys[0] = 0.0
        ys[-1] = 0.0
        return CouplingDistribution(piecewise.from_samples(xs, ys))
    if kind == "table":
        return CouplingDistribution(_pl_from_cfg(d))
    raise ValueError(f"unknown coupling kind {kind!r}")


def load_model(cfg: dict) -> Model:
    """Build a Model from a plain config mapping (see README for the schema)."""
    for key in ("background", "single_site", "coupling", "e_max"):
        if key not in cfg:
            raise KeyError(f"model config missing required key {key!r}")
    return Model(
        background=_background_from_cfg(cfg["background"]),
        site=_site_from_cfg(cfg["single_site"]),
        coupling=_coupling_from_cfg(cfg["coupling"]),
        e_max=float(cfg["e_max"]),
    )


def model_config_hash(cfg: dict) -> str:
    """Stable hash of a config mapping (canonical JSON, sorted keys)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def reference_model() -> Model:
    """Flat background, unit indicator site, uniform couplings on [0, 1]."""
    return load_model({
        "background": {"kind": "zero"},
        "single_site": {"kind": "indicator"},
        "coupling": {"kind": "uniform", "lo": 0.0, "hi": 1.0},
        "e_max": 3.0,
    })


def operator_suite_model() -> Model:
    """Instance tuned for kernel-norm studies.

    The couplings are strongly attractive (centered near -5.8), which
    makes the phase advance through every cell large enough that the
    cell masses int f u^2 stay bounded away from zero for every
    anchoring phase, and the coupling support is wide, so each row of
    the transition kernels spans a few dozen grid nodes at the default
    m = 400.  The smooth coupling density keeps the kernels C^1, so the
    midpoint-rule row sums converge fast.
    """
    return load_model({
        "background": {"kind": "zero", "sup_bound": 0.25},
        "single_site": {"kind": "indicator", "amplitude": 1.0},
        "coupling": {"kind": "raised_cosine", "center": -5.8, "halfwidth": 3.6},
        "e_max": 0.1,
    })


def smooth_demo_model() -> Model:
    """Smooth small site bump over a smooth background; couplings in [0, 1]."""
    span = 24.0
    xs = np.linspace(-span, span, int(span * 64) + 1)
    ys = 0.4 * np.cos(2.0 * math.pi * xs / math.sqrt(2.0))
    bg = BackgroundPotential(piecewise.from_samples(xs, ys), "zero", sup_bound=0.4)
    site = _site_from_cfg({"kind": "bump", "amplitude": 0.05, "interval": (-0.9, -0.1)})
    coup = _coupling_from_cfg({"kind": "uniform", "lo": 0.0, "hi": 1.0})
    return Model(bg, site, coup, e_max=1.0)
