"""Cross-validated likelihood maximization over kernel and mixture parameters.

Parameters live in log-space. The parameter vector is laid out as

    fixed kernel:     [log h,           z_cb, z_uniform, z_saliency]
    adaptive kernel:  [log h0, log a,   z_cb, z_uniform, z_saliency]

with the KDE logit pinned to 0. Disabled components keep their slot but get
zero gradient and are held fixed by the optimizer.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import Bounds, NonlinearConstraint, minimize
from scipy.special import logsumexp

from fixdens import kde, mixture
from fixdens.crossval import FoldPlan, make_fold_plan
from fixdens.data import DatasetBundle, FixationTable, ImageRecord, ValidationError
from fixdens.kde import AdaptiveKernelParams, FixedKernelParams, KernelParams
from fixdens.mixture import ComponentSet, MixtureParams

logger = logging.getLogger(__name__)

KERNEL_TYPES = ("fixed", "adaptive")


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    restarts: int = 50
    seed: int = 0
    h_min: float = 0.5
    log_h_bounds: tuple[float, float] = (math.log(0.5), math.log(500.0))
    log_alpha_bounds: tuple[float, float] = (-20.0, 20.0)
    logit_bounds: tuple[float, float] = (-20.0, 20.0)
    init_log_h_range: tuple[float, float] = (math.log(2.0), math.log(100.0))
    init_logit_range: tuple[float, float] = (-3.0, 3.0)
    ftol: float = 1e-8
    gtol: float = 1e-6
    max_iter: int = 500
    # "auto": L-BFGS-B when only box bounds apply, SLSQP with the bandwidth constraint
    method: str = "auto"

    def __post_init__(self):
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if not self.h_min > 0:
            raise ValidationError("h_min must be > 0")
        for name in ("log_h_bounds", "log_alpha_bounds", "logit_bounds", "init_log_h_range", "init_logit_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValidationError(f"{name} must be ordered")
        if self.method not in ("auto", "SLSQP", "trust-constr", "L-BFGS-B"):
            raise ValidationError(f"unsupported method {self.method!r}")


def n_kernel_params(kernel: str) -> int:
    return {"fixed": 1, "adaptive": 2}[kernel]


def unpack(theta, kernel: str, active) -> tuple[KernelParams, MixtureParams]:
    theta = np.asarray(theta, dtype=np.float64)
    nk = n_kernel_params(kernel)
    if kernel == "fixed":
        kp = FixedKernelParams(math.exp(theta[0]))
    else:
        kp = AdaptiveKernelParams(math.exp(theta[0]), math.exp(theta[1]))
    logits = np.concatenate([[0.0], theta[nk:nk + 3]])
    return kp, MixtureParams(logits, active)


def pack(kernel_params: KernelParams, mixture_params: MixtureParams) -> np.ndarray:
    if isinstance(kernel_params, FixedKernelParams):
        head = [math.log(kernel_params.h)]
    else:
        head = [math.log(kernel_params.h0), math.log(kernel_params.alpha)]
    return np.array(head + list(mixture_params.logits[1:]), dtype=np.float64)


class ImageObjective:
    """Mean held-out log-likelihood of one image and its exact gradient.

    The KDE operates on the pairwise distance matrix between fixations; each
    fold's pilot density and bandwidths come from that fold's training set.
    """

    def __init__(
        self,
        image: ImageRecord,
        table: FixationTable,
        plan: FoldPlan,
        components: ComponentSet,
        kernel: str,
        active,
    ):
        if kernel not in KERNEL_TYPES:
            raise ValidationError(f"unknown kernel type {kernel!r}")
        self.image = image
        self.kernel = kernel
        self.nk = n_kernel_params(kernel)
        self.active = np.asarray(active, dtype=bool)
        mixture.check_components(image, self.active, components)
        self.pinned = MixtureParams.pinned_index_for(self.active)
        self.size = image.size
        self.xy = table.xy
        fold_of = plan.test_fold_index()
        self.tested = np.flatnonzero(fold_of >= 0)
        self.fold_of_test = fold_of[self.tested]
        self.train = plan.train_mask()
        self.n_train = self.train.sum(axis=1)
        if self.active[mixture.KDE] and (self.n_train == 0).any():
            raise ValidationError(f"image {image.image_id!r}: fold with empty training set")
        diff = self.xy[:, None, :] - self.xy[None, :, :]
        self.d2 = (diff**2).sum(-1)
        # rows: tested fixations, columns: sources
        self.test_mask = self.train[self.fold_of_test]
        self.test_d2 = self.d2[self.tested]
        self.fixed_lds = mixture.fixed_component_logdensities(image, components, self.xy[self.tested])
        self.dim = self.nk + 3

    # free coordinates of theta for the optimizer
    def free_mask(self) -> np.ndarray:
        m = np.zeros(self.dim, dtype=bool)
        if self.active[mixture.KDE]:
            m[: self.nk] = True
        for k in (1, 2, 3):
            if self.active[k] and k != self.pinned:
                m[self.nk + k - 1] = True
        return m

    def _pilot(self, log_h0):
        """Fold pilot log densities at each source and their log-h0 derivative, (F, N)."""
        h0 = math.exp(log_h0)
        lz = kde.log_normalizer(self.xy, h0, self.size)
        dlz = kde.dlog_normalizer_dlogh(self.xy, h0, self.size)
        # [j, k]: kernel of source k evaluated at fixation j
        lk0 = -kde.LOG_2PI - 2 * log_h0 - lz[None, :] - self.d2 / (2 * h0 * h0)
        g0 = -2.0 + self.d2 / (h0 * h0) - dlz[None, :]
        m = lk0.max(axis=1)
        e = np.exp(lk0 - m[:, None])
        t = self.train.astype(np.float64)
        s = t @ e.T
        sg = t @ (e * g0).T
        with np.errstate(divide="ignore", invalid="ignore"):
            log_p = m[None, :] + np.log(s) - np.log(self.n_train)[:, None]
            dlog_p = sg / s
        return log_p, dlog_p

    def log_bandwidths(self, theta):
        """Log bandwidth of every (fold, source) pair and its kernel-parameter jacobian."""
        theta = np.asarray(theta, dtype=np.float64)
        nf, n = self.train.shape
        if self.kernel == "fixed":
            return np.full((nf, n), theta[0]), [np.ones((nf, n))]
        log_p, dlog_p = self._pilot(theta[0])
        log_h = theta[1] - 0.5 * log_p
        return log_h, [-0.5 * dlog_p, np.ones((nf, n))]

    def min_log_bandwidth(self, theta):
        """Smallest effective log bandwidth over all folds and training sources, with gradient."""
        log_h, jac = self.log_bandwidths(theta)
        masked = np.where(self.train, log_h, np.inf)
        f, j = np.unravel_index(np.argmin(masked), masked.shape)
        grad = np.zeros(self.dim)
        for p, d in enumerate(jac):
            grad[p] = d[f, j]
        return float(masked[f, j]), grad

    def _kde_terms(self, theta):
        log_h_f, jac_f = self.log_bandwidths(theta)
        # pairs outside a fold's training set may carry inf/nan from an underflowed pilot
        log_h_f = np.where(self.train, log_h_f, 0.0)
        jac_f = [np.where(self.train, d, 0.0) for d in jac_f]
        h_f = np.exp(log_h_f)
        lz_f = kde.log_normalizer(self.xy, h_f, self.size)
        dlz_f = kde.dlog_normalizer_dlogh(self.xy, h_f, self.size)
        rows = self.fold_of_test
        log_h = log_h_f[rows]
        h2 = np.exp(2 * log_h)
        lk = -kde.LOG_2PI - 2 * log_h - lz_f[rows] - self.test_d2 / (2 * h2)
        lk = np.where(self.test_mask, lk, -np.inf)
        lse = logsumexp(lk, axis=1)
        ll = lse - np.log(self.n_train[rows])
        r = np.exp(lk - lse[:, None])
        g = np.where(self.test_mask, -2.0 + self.test_d2 / h2 - dlz_f[rows], 0.0)
        rg = r * g
        dll = np.stack([(rg * d[rows]).sum(axis=1) for d in jac_f])
        return ll, dll

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        nt = len(self.tested)
        lds = np.empty((4, nt))
        lds[1:] = self.fixed_lds
        dkde = np.zeros((self.nk, nt))
        if self.active[mixture.KDE]:
            lds[0], dkde = self._kde_terms(theta)
        else:
            lds[0] = np.nan
        logits = np.concatenate([[0.0], theta[self.nk:self.nk + 3]])
        logits[self.pinned] = 0.0
        z = np.where(self.active, logits, -np.inf)
        log_w = z - logsumexp(z)
        idx = np.flatnonzero(self.active)
        terms = lds[idx] + log_w[idx, None]
        total = logsumexp(terms, axis=0)
        resp = np.exp(terms - total[None, :])
        value = float(total.mean())
        grad = np.zeros(self.dim)
        w = np.exp(log_w[idx])
        for pos, k in enumerate(idx):
            if k == mixture.KDE:
                grad[: self.nk] = (resp[pos][None, :] * dkde).mean(axis=1)
            elif k != self.pinned:
                grad[self.nk + k - 1] = resp[pos].mean() - w[pos]
        if not (np.isfinite(value) and np.isfinite(grad).all()):
            bad = np.flatnonzero(~np.isfinite(total) | ~np.isfinite(lds[0]) & self.active[0])
            where = ""
            if len(bad):
                i = int(self.tested[bad[0]])
                where = f" (fold {int(self.fold_of_test[bad[0]])}, fixation {i})"
            raise FloatingPointError(f"image {self.image.image_id!r}: non-finite objective{where}")
        return value, grad

    def value(self, theta) -> float:
        return self.value_and_grad(theta)[0]

    def pooled_log_pilot(self, log_h0):
        return kde.log_pilot_density(self.xy, math.exp(log_h0), self.size)


def objective_and_gradient(image, table, theta, plan, components, kernel, active):
    """Mean held-out log-likelihood (nats/fixation) and its gradient wrt ``theta``."""
    return ImageObjective(image, table, plan, components, kernel, active).value_and_grad(theta)


class GlobalObjective:
    """Mean over images of per-image mean held-out log-likelihood."""

    def __init__(self, objectives: Sequence[ImageObjective]):
        if not objectives:
            raise ValidationError("no crossvalidatable images")
        self.objectives = list(objectives)
        first = self.objectives[0]
        self.kernel, self.nk, self.dim = first.kernel, first.nk, first.dim
        self.active, self.pinned = first.active, first.pinned

    def free_mask(self):
        return self.objectives[0].free_mask()

    def value_and_grad(self, theta):
        v, g = 0.0, np.zeros(self.dim)
        for o in self.objectives:
            vi, gi = o.value_and_grad(theta)
            v += vi
            g += gi
        n = len(self.objectives)
        return v / n, g / n

    def value(self, theta):
        return self.value_and_grad(theta)[0]

    def min_log_bandwidth(self, theta):
        return min((o.min_log_bandwidth(theta) for o in self.objectives), key=lambda t: t[0])

    def pooled_log_pilot(self, log_h0):
        return np.concatenate([o.pooled_log_pilot(log_h0) for o in self.objectives])


@dataclass(frozen=True, eq=False)
class OptimResult:
    kernel_params: KernelParams | None
    mixture_params: MixtureParams
    objective: float
    restart_objectives: tuple[float, ...]
    iterations: tuple[int, ...]
    constraint_active: bool
    theta: np.ndarray = field(repr=False)
    best_restart: int = 0

    def to_dict(self, image_id: str | None = None) -> dict:
        from fixdens.crossval import kernel_to_dict

        d = {
            "kernel": kernel_to_dict(self.kernel_params),
            **self.mixture_params.to_dict(),
            "active": [c for c, a in zip(mixture.COMPONENTS, self.mixture_params.active) if a],
            "objective_nats": self.objective,
            "restart_objectives": [v if math.isfinite(v) else None for v in self.restart_objectives],
            "iterations": list(self.iterations),
            "constraint_active": self.constraint_active,
            "best_restart": self.best_restart,
        }
        if image_id is not None:
            d = {"image_id": image_id, **d}
        return d


def restart_rng(seed: int, key: str, restart: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8")), int(restart)])


def _bounds(obj, config: OptimConfig):
    lo = np.empty(obj.dim)
    hi = np.empty(obj.dim)
    log_hmin = math.log(config.h_min)
    if obj.kernel == "fixed":
        lo[0] = max(config.log_h_bounds[0], log_hmin)
        hi[0] = config.log_h_bounds[1]
    else:
        lo[0], hi[0] = config.log_h_bounds
        lo[1], hi[1] = config.log_alpha_bounds
    lo[obj.nk:], hi[obj.nk:] = config.logit_bounds
    if not (lo < hi).all():
        raise ValidationError("h_min exceeds the bandwidth upper bound")
    return lo, hi


def _initial_point(obj, config: OptimConfig, rng, lo, hi) -> np.ndarray:
    theta = np.zeros(obj.dim)
    theta[0] = rng.uniform(*config.init_log_h_range)
    theta[obj.nk:] = rng.uniform(*config.init_logit_range, size=3)
    if obj.kernel == "adaptive":
        # median initial bandwidth ~ h0
        theta[1] = theta[0] + 0.5 * float(np.median(obj.pooled_log_pilot(theta[0])))
    return np.clip(theta, lo, hi)


def _repair(obj, theta, config, lo, hi):
    """Raise alpha until the smallest effective bandwidth reaches h_min."""
    if obj.kernel != "adaptive" or not obj.active[mixture.KDE]:
        return theta, True
    theta = theta.copy()
    log_hmin = math.log(config.h_min)
    for _ in range(3):
        m, _ = obj.min_log_bandwidth(theta)
        if m >= log_hmin:
            return theta, True
        theta[1] += log_hmin - m
    m, _ = obj.min_log_bandwidth(theta)
    return theta, m >= log_hmin - 1e-12 and theta[1] <= hi[1]


def _run_restart(obj, x0, config, lo, hi, free):
    def full(x):
        t = x0.copy()
        t[free] = x
        return t

    def fun(x):
        try:
            v, g = obj.value_and_grad(full(x))
        except FloatingPointError:
            return np.inf, np.zeros(free.sum())
        return -v, -g[free]

    bounds = Bounds(lo[free], hi[free])
    needs_constraint = obj.kernel == "adaptive" and obj.active[mixture.KDE]
    method = config.method
    if method == "auto":
        method = "SLSQP" if needs_constraint else "L-BFGS-B"
    if method == "L-BFGS-B" and needs_constraint:
        raise ValidationError("L-BFGS-B cannot honour the minimum-bandwidth constraint")
    log_hmin = math.log(config.h_min)
    constraints = ()
    if needs_constraint:
        if method == "SLSQP":
            constraints = (
                {
                    "type": "ineq",
                    "fun": lambda x: np.array([obj.min_log_bandwidth(full(x))[0] - log_hmin]),
                    "jac": lambda x: obj.min_log_bandwidth(full(x))[1][free][None, :],
                },
            )
        else:
            constraints = (
                NonlinearConstraint(
                    lambda x: obj.min_log_bandwidth(full(x))[0],
                    log_hmin,
                    np.inf,
                    jac=lambda x: obj.min_log_bandwidth(full(x))[1][free][None, :],
                ),
            )
    if method == "SLSQP":
        options = {"maxiter": config.max_iter, "ftol": config.ftol}
    elif method == "L-BFGS-B":
        options = {"maxiter": config.max_iter, "ftol": config.ftol, "gtol": config.gtol}
    else:
        options = {"maxiter": config.max_iter, "gtol": config.gtol, "xtol": 1e-10}
    with warnings.catch_warnings():
        # SLSQP clips steps that overshoot the box; the clipped point is what we want
        warnings.filterwarnings("ignore", message="Values in x were outside bounds", category=RuntimeWarning)
        res = minimize(fun, x0[free], jac=True, method=method, bounds=bounds, constraints=constraints, options=options)
    theta = full(np.clip(res.x, lo[free], hi[free]))
    return theta, int(getattr(res, "nit", 0) or 0)


def _score(obj, theta, config, lo, hi):
    """Repair ``theta`` and evaluate it; infeasible or non-finite points score -inf."""
    theta, feasible = _repair(obj, theta, config, lo, hi)
    try:
        value = obj.value(theta) if feasible else -np.inf
    except FloatingPointError:
        value = -np.inf
    return theta, value


def _optimize(obj, config: OptimConfig, key: str, initial_points=()) -> OptimResult:
    lo, hi = _bounds(obj, config)
    free = obj.free_mask()
    objectives, iterations, thetas = [], [], []
    for r in range(config.restarts):
        x0 = _initial_point(obj, config, restart_rng(config.seed, key, r), lo, hi)
        x0, _ = _repair(obj, x0, config, lo, hi)
        nit = 0
        theta = x0
        if free.any():
            theta, nit = _run_restart(obj, x0, config, lo, hi, free)
        theta, value = _score(obj, theta, config, lo, hi)
        objectives.append(value)
        iterations.append(nit)
        thetas.append(theta)
    for start in initial_points:
        # a supplied start is itself a candidate, so the result is never worse than it
        start, start_value = _score(obj, np.clip(np.asarray(start, dtype=np.float64), lo, hi), config, lo, hi)
        theta, value, nit = start, start_value, 0
        if free.any():
            moved, nit = _run_restart(obj, start, config, lo, hi, free)
            moved, moved_value = _score(obj, moved, config, lo, hi)
            if moved_value >= start_value:
                theta, value = moved, moved_value
        objectives.append(value)
        iterations.append(nit)
        thetas.append(theta)
    values = np.array(objectives)
    if not np.isfinite(values).any():
        raise OptimizationError(f"{key}: all restarts failed to produce a finite objective")
    best = int(np.argmax(values))  # first maximum: ties go to the lowest restart index
    theta = thetas[best]
    kp, mp = unpack(theta, obj.kernel, obj.active)
    if obj.kernel == "fixed":
        at_bound = theta[0] <= lo[0] + 1e-9
    else:
        at_bound = obj.min_log_bandwidth(theta)[0] <= math.log(config.h_min) + 1e-6
    return OptimResult(
        kernel_params=kp if obj.active[mixture.KDE] else None,
        mixture_params=mp,
        objective=float(values[best]),
        restart_objectives=tuple(float(v) for v in objectives),
        iterations=tuple(iterations),
        constraint_active=bool(at_bound and obj.active[mixture.KDE]),
        theta=theta,
        best_restart=best,
    )


def optimize_image(
    image: ImageRecord,
    table: FixationTable,
    config: OptimConfig,
    plan: FoldPlan | str = "loso",
    components: ComponentSet | None = None,
    kernel: str = "adaptive",
    active=None,
    initial_points=(),
) -> OptimResult:
    """Maximize the cross-validated log-likelihood of one image.

    ``config.restarts`` log-uniform random starts (deterministic in
    ``config.seed`` and the image id); ``initial_points`` are optional extra
    starts in the packed parameter layout.
    """
    if isinstance(plan, str):
        plan = make_fold_plan(table, plan)
    active = np.ones(4, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    obj = ImageObjective(image, table, plan, components or ComponentSet(), kernel, active)
    return _optimize(obj, config, image.image_id, initial_points)


def optimize_global(
    dataset: DatasetBundle,
    config: OptimConfig,
    scheme: str = "loso",
    components: Mapping[str, ComponentSet] | None = None,
    kernel: str = "adaptive",
    active=None,
    initial_points=(),
) -> OptimResult:
    """One parameter set shared by every crossvalidatable image."""
    active = np.ones(4, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    components = components or {}
    objectives = []
    for image_id in dataset.crossvalidatable_ids:
        table = dataset.fixations[image_id]
        objectives.append(
            ImageObjective(
                dataset.image(image_id),
                table,
                make_fold_plan(table, scheme),
                components.get(image_id, ComponentSet()),
                kernel,
                active,
            )
        )
    return _optimize(GlobalObjective(objectives), config, "__global__", initial_points)


def effective_bandwidths(image, table, plan, kernel_params: KernelParams) -> list[np.ndarray]:
    """Recompute every fold's per-source bandwidths from scratch (feasibility audit)."""
    out = []
    for train, _ in plan.folds:
        out.append(kde.source_bandwidths(table.xy[train], kernel_params, image.size))
    return out
