"""Control-field synthesis: grid, storage, funnel and geodesic controls,
and the five-phase schedules composing them.

The approximate lane synthesizes genuinely Lipschitz fields and simulates
the resulting flow; the exact lane transports atoms with stopped flows and a
quadratic-cost geodesic, storing the control as a per-plan-entry witness
(the velocity field is Borel, not Lipschitz, and atoms may overlap).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .flow import (TimeField, Trajectory, flow_push, stopped_flow_batch,
                   choose_step, _integrate_batch as _integrate_batch_local)
from .geometry import (Region, cutoff_theta, weight_eta,
                       check_geometric_condition, ConditionFailure)
from .measure import (ParticleMeasure, GridPartition, LinePartition,
                      quantile_partition, line_quantile_partition, combine)
from .ot import wp_discrete, displacement_interpolate, subsampled_w1

__all__ = [
    "ControlSegment",
    "ControlSchedule",
    "GridControlField",
    "grid_control",
    "storage_control",
    "storage_total",
    "funnel_control",
    "funnel_total",
    "geodesic_transport",
    "approx_controller",
    "exact_controller",
    "bv_blowup_diagnostic",
    "shear_diagnostic",
    "grid_error_bound",
    "ControllerResult",
    "FUNNEL_K_CAP",
]

FUNNEL_K_CAP = 2 ** 20


def grid_error_bound(n: int) -> float:
    """Finite-n transport error of the moving-cell construction:
    2(n-2)²/n³ + 8(n-1)/n²."""
    return 2.0 * (n - 2) ** 2 / n ** 3 + 8.0 * (n - 1) / n ** 2


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass
class ControlSegment:
    t_start: float
    t_end: float
    field: TimeField
    label: str

    def descriptor(self):
        return {"label": self.label, "t_start": self.t_start,
                "t_end": self.t_end, "field": self.field.descriptor}


class ControlSchedule:
    """Contiguous time-segmented concatenation of total velocity fields."""

    def __init__(self, segments):
        if not segments:
            raise ValueError("schedule needs at least one segment")
        t = segments[0].t_start
        for seg in segments:
            if abs(seg.t_start - t) > 1e-9:
                raise ValueError("segments must be contiguous")
            if seg.t_end <= seg.t_start + 1e-15:
                raise ValueError("segments need positive length")
            t = seg.t_end
        self.segments = list(segments)

    @property
    def t_start(self):
        return self.segments[0].t_start

    @property
    def horizon(self):
        return self.segments[-1].t_end

    def segment_at(self, t: float) -> ControlSegment:
        # right-continuous: boundary times belong to the later segment
        for seg in self.segments:
            if seg.t_start <= t < seg.t_end:
                return seg
        return self.segments[-1]

    def evaluate(self, pts, t):
        return self.segment_at(t).field.evaluate(pts, t)

    def control_part(self, pts, t):
        return self.segment_at(t).field.control_part(pts, t)

    def simulate(self, mu: ParticleMeasure, tol: float,
                 snapshots_per_segment: int = 5) -> Trajectory:
        times = [self.t_start]
        states = [mu]
        state = mu
        for seg in self.segments:
            sub = np.linspace(seg.t_start, seg.t_end, snapshots_per_segment + 1)[1:]
            prev = seg.t_start
            advance = getattr(seg.field, "advect", None)
            for t in sub:
                if advance is not None:
                    state = advance(state, prev, t, tol)
                else:
                    state = flow_push(seg.field, state, prev, t, tol)
                times.append(t)
                states.append(state)
                prev = t
        return Trajectory(np.array(times), states, field_ref=self,
                          meta={"segments": [s.label for s in self.segments]})

    def max_control_outside(self, omega: Region, n_samples: int, seed: int,
                            bbox=None) -> float:
        """Largest sampled |control| outside omega over all segments."""
        rng = np.random.default_rng(seed)
        if bbox is None:
            lo, hi = omega.bounding_box()
            span = hi - lo
            lo, hi = lo - span, hi + span
        else:
            lo, hi = bbox
        pts = lo + (hi - lo) * rng.random((n_samples, omega.dim))
        pts = pts[~omega.contains(pts)]
        worst = 0.0
        for seg in self.segments:
            for t in np.linspace(seg.t_start, seg.t_end, 5)[:-1]:
                ctrl = seg.field.control_part(pts, t)
                if ctrl.size:
                    worst = max(worst, float(np.max(np.linalg.norm(ctrl, axis=1))))
        return worst

    @property
    def descriptor(self):
        return {"kind": "schedule", "horizon": self.horizon,
                "segments": [s.descriptor() for s in self.segments]}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.descriptor, fh, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# grid control (moving quantile cells)
# ---------------------------------------------------------------------------

class GridControlField(TimeField):
    """Piecewise-affine field carrying inner quantile cells onto their targets.

    Inside the moving cell (i, j) the velocity is (ax_i(t) x + bx_i(t),
    ay_ij(t) y + by_ij(t)); the cell boundaries are themselves
    characteristics, so the flow maps source cells onto target cells exactly.
    Outside, each cell's formula is damped by a quintic falloff over half the
    gap to its neighbour, which keeps the field smooth, bounded and supported
    near the unit box.
    """

    def __init__(self, part_src, part_tgt, T):
        if part_src.n != part_tgt.n:
            raise ValueError("partitions must share n")
        self.src = part_src
        self.tgt = part_tgt
        self.n = part_src.n
        self.T = float(T)
        self.planar = isinstance(part_src, GridPartition)
        if self.planar != isinstance(part_tgt, GridPartition):
            raise ValueError("partition dimension mismatch")
        self.axm = part_src.inner_x[:, 0].copy() if self.planar else part_src.inner[:, 0].copy()
        self.axp = part_src.inner_x[:, 1].copy() if self.planar else part_src.inner[:, 1].copy()
        self.bxm = part_tgt.inner_x[:, 0].copy() if self.planar else part_tgt.inner[:, 0].copy()
        self.bxp = part_tgt.inner_x[:, 1].copy() if self.planar else part_tgt.inner[:, 1].copy()
        if self.planar:
            self.aym = part_src.inner_y[:, :, 0].copy()
            self.ayp = part_src.inner_y[:, :, 1].copy()
            self.bym = part_tgt.inner_y[:, :, 0].copy()
            self.byp = part_tgt.inner_y[:, :, 1].copy()
        self._assert_disjoint()
        dim = 2 if self.planar else 1
        sup, lip = self._bounds()
        super().__init__(self._eval, dim, lipschitz_bound=lip, sup_bound=sup,
                         time_domain=(0.0, self.T), label=f"grid_n{self.n}",
                         control_fn=self._eval,
                         descriptor={"kind": "grid", "n": self.n, "T": self.T})

    # boundary interpolants and their coefficient functions -----------------
    def _interp(self, a, b, t):
        return a + (t / self.T) * (b - a)

    def _coeffs(self, am, ap, bm, bp, t):
        cm = self._interp(am, bm, t)
        cp = self._interp(ap, bp, t)
        width = cp - cm
        alpha = ((bp - ap) - (bm - am)) / (self.T * width)
        beta = (cp * (bm - am) - cm * (bp - ap)) / (self.T * width)
        return cm, cp, alpha, beta

    def _margins(self, cm, cp):
        # half gaps to the neighbouring moving cells; walls of the unit box
        # bound the outermost falloffs
        left = np.empty_like(cm)
        right = np.empty_like(cp)
        left[0] = np.maximum(cm[0], 1e-12)
        left[1:] = 0.5 * (cm[1:] - cp[:-1])
        right[:-1] = 0.5 * (cm[1:] - cp[:-1])
        right[-1] = np.maximum(1.0 - cp[-1], 1e-12)
        return np.maximum(left, 1e-12), np.maximum(right, 1e-12)

    def _tables(self, t):
        cxm, cxp, ax, bx = self._coeffs(self.axm, self.axp, self.bxm, self.bxp, t)
        gxm, gxp = self._margins(cxm, cxp)
        if not self.planar:
            return cxm, cxp, ax, bx, gxm, gxp
        cym, cyp, ay, by = self._coeffs(self.aym, self.ayp, self.bym, self.byp, t)
        gym = np.empty_like(cym)
        gyp = np.empty_like(cyp)
        for i in range(self.n):
            gm, gp = self._margins(cym[i], cyp[i])
            gym[i] = gm
            gyp[i] = gp
        return cxm, cxp, ax, bx, gxm, gxp, cym, cyp, ay, by, gym, gyp

    def _eval(self, pts, t):
        t = min(max(t, 0.0), self.T)
        if self.planar:
            (cxm, cxp, ax, bx, gxm, gxp,
             cym, cyp, ay, by, gym, gyp) = self._tables(t)
            return _kernels.grid_eval_2d(pts[:, 0], pts[:, 1], cxm, cxp, ax, bx,
                                         cym, cyp, ay, by, gxm, gxp, gym, gyp)
        cxm, cxp, ax, bx, gxm, gxp = self._tables(t)
        return _kernels.grid_eval_1d(pts[:, 0], cxm, cxp, ax, bx, gxm, gxp)

    def _assert_disjoint(self):
        for t in (0.0, self.T):
            cxm = self._interp(self.axm, self.bxm, t)
            cxp = self._interp(self.axp, self.bxp, t)
            if np.any(cxp[:-1] >= cxm[1:]):
                raise ValueError("moving cells overlap in x")
            if self.planar:
                cym = self._interp(self.aym, self.bym, t)
                cyp = self._interp(self.ayp, self.byp, t)
                if np.any(cyp[:, :-1] >= cym[:, 1:]):
                    raise ValueError("moving cells overlap in y")

    def _bounds(self):
        sup = 0.0
        lip = 0.0
        for t in np.linspace(0.0, self.T, 5):
            tabs = self._tables(t)
            cxm, cxp, ax, bx, gxm, gxp = tabs[:6]
            vel_edges = np.maximum(np.abs(ax * (cxm - gxm) + bx),
                                   np.abs(ax * (cxp + gxp) + bx))
            sup_t = float(np.max(vel_edges))
            lip_t = float(np.max(np.abs(ax)
                                 + vel_edges * 1.875 / np.minimum(gxm, gxp)))
            if self.planar:
                cym, cyp, ay, by, gym, gyp = tabs[6:]
                vy = np.maximum(np.abs(ay * (cym - gym) + by),
                                np.abs(ay * (cyp + gyp) + by))
                sup_t = max(sup_t, float(np.max(vy)))
                lip_t = max(lip_t, float(np.max(np.abs(ay)
                                                + vy * 1.875 / np.minimum(gym, gyp))))
            sup = max(sup, sup_t)
            lip = max(lip, lip_t)
        return sup, lip

    # test hooks -------------------------------------------------------------
    def corner_pairs(self):
        """(start, end) positions of every inner-cell corner."""
        starts, ends = [], []
        if self.planar:
            for i in range(self.n):
                for j in range(self.n):
                    for xa, xb in ((self.axm[i], self.bxm[i]), (self.axp[i], self.bxp[i])):
                        for ya, yb in ((self.aym[i, j], self.bym[i, j]),
                                       (self.ayp[i, j], self.byp[i, j])):
                            starts.append([xa, ya])
                            ends.append([xb, yb])
        else:
            for i in range(self.n):
                starts.extend([[self.axm[i]], [self.axp[i]]])
                ends.extend([[self.bxm[i]], [self.bxp[i]]])
        return np.array(starts), np.array(ends)

    def source_cells(self):
        if self.planar:
            return [(np.array([self.axm[i], self.aym[i, j]]),
                     np.array([self.axp[i], self.ayp[i, j]]))
                    for i in range(self.n) for j in range(self.n)]
        return [(np.array([self.axm[i]]), np.array([self.axp[i]]))
                for i in range(self.n)]

    def target_cells(self):
        if self.planar:
            return [(np.array([self.bxm[i], self.bym[i, j]]),
                     np.array([self.bxp[i], self.byp[i, j]]))
                    for i in range(self.n) for j in range(self.n)]
        return [(np.array([self.bxm[i]]), np.array([self.bxp[i]]))
                for i in range(self.n)]


def grid_control(partition_src, partition_tgt, T: float) -> GridControlField:
    """Field whose time-T flow carries each inner source cell onto its target."""
    if T <= 0:
        raise ValueError("T must be positive")
    return GridControlField(partition_src, partition_tgt, T)


# ---------------------------------------------------------------------------
# storage control
# ---------------------------------------------------------------------------

def storage_control(v: TimeField, omega0: Region, k: int) -> TimeField:
    """Control (theta_k - 1) v: cancels the drift progressively inside omega0,
    exactly zero outside it and total velocity exactly zero at depth 1/k."""
    theta = cutoff_theta(omega0, k)

    def ctrl(pts, t):
        return (theta.evaluate(pts) - 1.0)[:, None] * v.evaluate(pts, t)

    u = TimeField(ctrl, v.dim,
                  lipschitz_bound=v.sup_bound * 1.875 * k + 2 * v.lipschitz_bound,
                  sup_bound=v.sup_bound, support_region=omega0,
                  label=f"storage_k{k}", control_fn=ctrl,
                  descriptor={"kind": "storage", "k": k,
                              "omega0": omega0.to_dict()})
    u.theta = theta
    return u


def storage_total(v: TimeField, omega0: Region, k: int) -> TimeField:
    """Total velocity theta_k * v of the storage phase."""
    u = storage_control(v, omega0, k)
    theta = u.theta

    def total(pts, t):
        return theta.evaluate(pts)[:, None] * v.evaluate(pts, t)

    fld = TimeField(total, v.dim,
                    lipschitz_bound=v.sup_bound * 1.875 * k + v.lipschitz_bound,
                    sup_bound=v.sup_bound, label=f"storage_total_k{k}",
                    control_fn=u.control_fn, descriptor=u.descriptor)
    fld.theta = theta
    fld.k = k
    return fld


# ---------------------------------------------------------------------------
# funnel control
# ---------------------------------------------------------------------------

def _blend_factor(region: Region, band: float):
    """1 inside region, quintic decay to 0 at distance band outside it."""
    from .geometry import _smootherstep

    def factor(pts):
        d = np.maximum(region.signed_distance(pts), 0.0)
        return 1.0 - _smootherstep(d / band)

    return factor


def _eta_grad_lipschitz(eta, omega1: Region, per_axis: int = 48) -> float:
    lo, hi = omega1.bounding_box()
    axes = [np.linspace(lo[a], hi[a], per_axis) for a in range(omega1.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    keep = omega1.contains(pts)
    pts = pts[keep]
    grad = eta.gradient(pts)
    est = 0.0
    for a in range(omega1.dim):
        shift = np.zeros(omega1.dim)
        shift[a] = 1e-5
        diff = (eta.gradient(pts + shift) - grad) / 1e-5
        est = max(est, float(np.max(np.abs(diff))))
    return est


def _peak_curvatures(eta, peak, h: float = 1e-5) -> np.ndarray:
    """Per-axis second derivative magnitude of the weight at its peak."""
    peak = np.asarray(peak, dtype=float)
    d = len(peak)
    out = np.empty(d)
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        gp = eta.gradient((peak + e)[None, :])[0, a]
        gm = eta.gradient((peak - e)[None, :])[0, a]
        out[a] = abs(gp - gm) / (2 * h)
    return out


def _layer_max_grad(eta, region: Region, band: float, outside: bool,
                    n: int = 4096, seed: int = 0) -> float:
    """Sampled max |grad eta| in a boundary layer of the region."""
    lo, hi = region.bounding_box()
    rng = np.random.default_rng(seed)
    pts = (lo - band) + (hi - lo + 2 * band) * rng.random((n, region.dim))
    sd = region.signed_distance(pts)
    keep = (sd >= -band) & (sd <= 0.0) if not outside else (np.abs(sd) <= band)
    pts = pts[keep]
    if len(pts) == 0:
        return 0.0
    return float(np.max(np.linalg.norm(eta.gradient(pts), axis=1)))


def funnel_total(v: TimeField, omega1: Region, s0: Region, k: int,
                 eta=None, blend_band: float | None = None,
                 axis_weights=None):
    """Total velocity of the funnel phase: k grad(eta) inside omega1, the
    ambient v outside a blend band around it. The control part is the
    difference, supported in the inflated omega1.

    ``axis_weights`` rescales the gain per coordinate (the ascent of the
    weight in stretched coordinates); the escalation uses it to keep axes
    that arrive early from compressing while the slow axis finishes.
    """
    if eta is None:
        eta, _, _ = weight_eta(omega1, s0)
    if blend_band is None:
        blend_band = 0.1 * omega1.inradius()
    if axis_weights is None:
        weights = np.ones(v.dim)
    else:
        weights = np.asarray(axis_weights, dtype=float)
    blend = _blend_factor(omega1, blend_band)

    def total(pts, t):
        b = blend(pts)[:, None]
        ascent = float(k) * weights * eta.gradient(pts)
        return b * ascent + (1.0 - b) * v.evaluate(pts, t)

    def ctrl(pts, t):
        ascent = float(k) * weights * eta.gradient(pts)
        return blend(pts)[:, None] * (ascent - v.evaluate(pts, t))

    grad_lip = getattr(eta, "grad_lipschitz", None)
    if grad_lip is None:
        grad_lip = _eta_grad_lipschitz(eta, omega1)
        eta.grad_lipschitz = grad_lip
    sup_grad = getattr(eta, "sup_gradient", None)
    if sup_grad is None:
        lo, hi = omega1.bounding_box()
        probe = lo + (hi - lo) * np.random.default_rng(0).random((2048, omega1.dim))
        probe = probe[omega1.contains(probe)]
        sup_grad = float(np.max(np.linalg.norm(eta.gradient(probe), axis=1)))
        eta.sup_gradient = sup_grad
    # the blend factor is steep only in its own layer, where the gradient of
    # the weight is small by construction; use the layer-local speed there
    shell_speed = k * _layer_max_grad(eta, omega1, blend_band, outside=False)
    lip = (k * grad_lip
           + (shell_speed + v.sup_bound) * 1.875 / blend_band
           + v.lipschitz_bound)
    fld = TimeField(total, v.dim, lipschitz_bound=lip,
                    sup_bound=k * sup_grad + v.sup_bound,
                    label=f"funnel_k{k}", control_fn=ctrl,
                    descriptor={"kind": "funnel", "k": k,
                                "axis_weights": weights.tolist(),
                                "omega1": omega1.to_dict(), "s0": s0.to_dict()})
    fld.eta = eta
    fld.k = k
    fld.blend_band = blend_band
    fld.axis_weights = weights
    return fld


def hold_total(v: TimeField, region: Region, k: int) -> TimeField:
    """Freeze-in-place segment: the storage cutoff built on ``region`` keeps
    everything at depth 1/k motionless while the ambient drift acts outside."""
    fld = storage_total(v, region, k)
    fld.label = f"hold_k{k}"
    fld.descriptor = {"kind": "hold", "k": k, "region": region.to_dict()}
    return fld


def affine_funnel_total(v: TimeField, omega1: Region, cloud_box, target_box,
                        duration: float, blend_band: float) -> TimeField:
    """Straight-line funnel: a time-gated affine similarity carrying the
    cloud box onto a copy inside the target box.

    Valid when omega1 is convex (the swept boxes stay inside the hull of the
    two). Unlike the gradient funnel, translation and contraction decouple,
    so the per-axis contraction is exactly the ratio the geometry requires
    and early arrivals never keep compressing. The ramp has zero velocity at
    both ends, which makes the segment handoff exact.
    """
    if not omega1.is_convex():
        raise ValueError("the straight-line funnel needs a convex omega1")
    c0 = cloud_box.center_point()
    c1 = target_box.center_point()
    half0 = 0.5 * (cloud_box.hi - cloud_box.lo)
    half1 = 0.5 * (target_box.hi - target_box.lo)
    lam = np.minimum(1.0, 0.9 * half1 / np.maximum(half0, 1e-300))
    log_lam = np.log(lam)
    span = float(duration)

    hull = Region.box(np.minimum(cloud_box.lo, c1 - lam * half0 - 1e-12),
                      np.maximum(cloud_box.hi, c1 + lam * half0 + 1e-12))
    if not np.all(omega1.contains(np.stack(np.meshgrid(
            *zip(hull.lo, hull.hi), indexing="ij"), axis=-1).reshape(-1, v.dim))):
        raise ValueError("funnel endpoints do not fit inside omega1")
    blend = _blend_factor(omega1, blend_band)

    from .geometry import _smootherstep, _smootherstep_d

    def ramp(t):
        u = min(max(t / span, 0.0), 1.0)
        return _smootherstep(np.array([u]))[0], \
            _smootherstep_d(np.array([u]))[0] / span

    def total(pts, t):
        w, wd = ramp(t)
        c_t = c0 + w * (c1 - c0)
        drift = wd * ((c1 - c0) + log_lam * (np.atleast_2d(pts) - c_t))
        b = blend(pts)[:, None]
        return b * drift + (1.0 - b) * v.evaluate(pts, t)

    def ctrl(pts, t):
        w, wd = ramp(t)
        c_t = c0 + w * (c1 - c0)
        drift = wd * ((c1 - c0) + log_lam * (np.atleast_2d(pts) - c_t))
        return blend(pts)[:, None] * (drift - v.evaluate(pts, t))

    wd_max = 1.875 / span
    reach = float(np.linalg.norm(c1 - c0)
                  + np.max(np.abs(log_lam)) * np.linalg.norm(
                      omega1.bounding_box()[1] - omega1.bounding_box()[0]))
    sup = wd_max * reach + v.sup_bound
    lip = (wd_max * float(np.max(np.abs(log_lam)))
           + (sup + v.sup_bound) * 1.875 / blend_band + v.lipschitz_bound)
    fld = TimeField(total, v.dim, lipschitz_bound=lip, sup_bound=sup,
                    support_region=omega1.inflate(blend_band),
                    time_domain=(0.0, span), label="funnel_affine",
                    control_fn=ctrl,
                    descriptor={"kind": "funnel_affine",
                                "ratios": lam.tolist(),
                                "from": cloud_box.to_dict(),
                                "to": target_box.to_dict()})
    fld.ratios = lam
    fld.expansion = float(np.max(1.0 / lam))
    return fld


def funnel_control(v: TimeField, omega1: Region, s0: Region, delta: float,
                   mu: ParticleMeasure, blend_band: float | None = None,
                   tol: float = 1e-6):
    """Escalate the gradient-ascent gain until every particle reaches s0
    strictly before delta; returns (control field, k used).

    Doubles k from 1; termination follows from the no-critical-point
    property of the weight (the ascent speed is bounded below outside s0).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    inside = omega1.contains(mu.positions)
    if not np.all(inside):
        bad = mu.positions[~inside][0]
        raise ValueError(f"particle at {bad.tolist()} is outside the funnel "
                         "domain omega1")
    eta, kappa0, kappa1 = weight_eta(omega1, s0)
    curv = _peak_curvatures(eta, s0.center_point())

    # ascent paths do not depend on a scalar gain, so hitting times scale
    # exactly like 1/k: a probe run at k = 1 sets the gain, and the per-axis
    # weights then cap how hard early axes keep compressing while the slow
    # one finishes (contraction budget in e-folds)
    def probe(weights, gain, horizon):
        total = funnel_total(v, omega1, s0, gain, eta=eta,
                             blend_band=blend_band, axis_weights=weights)
        _, hits = stopped_flow_batch(total, s0, mu.positions, 0.0, horizon, tol)
        return hits

    probe_horizon = 8.0 * delta
    tau_max = None
    while probe_horizon <= 512.0 * delta:
        hits = probe(None, 1, probe_horizon)
        if not np.any(np.isnan(hits)):
            tau_max = float(np.max(hits))
            break
        probe_horizon *= 8.0
    if tau_max is None:
        stranded = mu.positions[np.isnan(hits)]
        raise RuntimeError(
            f"funnel probe found {len(stranded)} stranded particles within "
            f"horizon {probe_horizon / 8:.3g} (first: {stranded[0].tolist()}); "
            "the geometry likely violates s0 strictly inside omega1")

    budget = 18.0
    k = max(1, 2 ** math.ceil(math.log2(max(tau_max, 1e-12) / (0.9 * delta))))
    while k <= FUNNEL_K_CAP:
        tau_star = min(1.15 * tau_max / k, 0.98 * delta)
        weights = np.minimum(1.0, budget / np.maximum(curv * k * tau_star, 1e-9))
        total = funnel_total(v, omega1, s0, k, eta=eta, blend_band=blend_band,
                             axis_weights=weights)
        _, hits = stopped_flow_batch(total, s0, mu.positions, 0.0,
                                     0.98 * delta, tol)
        ok = not np.any(np.isnan(hits))
        if ok:
            tau_star = min(1.05 * float(np.max(hits)), 0.98 * delta)
            final = flow_push(total, mu, 0.0, tau_star, tol)
            if np.all(s0.contains(final.positions)):
                ctrl = TimeField(total.control_fn, v.dim,
                                 lipschitz_bound=total.lipschitz_bound + v.lipschitz_bound,
                                 sup_bound=total.sup_bound + v.sup_bound,
                                 support_region=omega1.inflate(total.blend_band),
                                 label=f"funnel_control_k{k}",
                                 control_fn=total.control_fn,
                                 descriptor=total.descriptor)
                ctrl.eta = eta
                ctrl.kappa = (kappa0, kappa1)
                ctrl.k = k
                ctrl.total_field = total
                ctrl.tau_star = tau_star
                ctrl.final_state = final
                ctrl.axis_weights = weights
                return ctrl, k
        k *= 2
    raise RuntimeError(
        f"funnel gain escalation exceeded {FUNNEL_K_CAP}; "
        "the geometry likely violates s0 strictly inside omega1")


# ---------------------------------------------------------------------------
# geodesic transport
# ---------------------------------------------------------------------------

class ParticleWitnessField(TimeField):
    """Borel control witness: velocities defined along recorded atom paths.

    Off the atom set the field evaluates to the ambient velocity, so the
    control part vanishes identically away from the transported atoms (in
    particular outside the control region).
    """

    def __init__(self, knots, paths, base: TimeField, label, descriptor,
                 match_tol=1e-9):
        self.knots = np.asarray(knots, dtype=float)
        self.paths = np.asarray(paths, dtype=float)   # (E, K, d)
        self.base = base
        self.match_tol = float(match_tol)
        seg = np.diff(self.paths, axis=1)
        dt = np.diff(self.knots)
        self._vels = seg / dt[None, :, None]
        speed = float(np.max(np.linalg.norm(self._vels, axis=2))) if seg.size else 0.0
        super().__init__(self._eval, self.paths.shape[2],
                         lipschitz_bound=math.inf, sup_bound=speed + base.sup_bound,
                         label=label, control_fn=self._ctrl, descriptor=descriptor)

    def positions_at(self, t):
        t = np.clip(t, self.knots[0], self.knots[-1])
        j = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0,
                    len(self.knots) - 2)
        lam = (t - self.knots[j]) / (self.knots[j + 1] - self.knots[j])
        return (1 - lam) * self.paths[:, j, :] + lam * self.paths[:, j + 1, :], j

    def _witness(self, pts, t):
        pos, j = self.positions_at(t)
        out = np.full_like(pts, np.nan)
        for q in range(pts.shape[0]):
            d = np.linalg.norm(pos - pts[q], axis=1)
            e = int(np.argmin(d))
            if d[e] <= self.match_tol:
                out[q] = self._vels[e, min(j, self._vels.shape[1] - 1)]
        return out

    def _eval(self, pts, t):
        w = self._witness(pts, t)
        miss = np.isnan(w[:, 0])
        if np.any(miss):
            w[miss] = self.base.evaluate(pts[miss], t)
        return w

    def _ctrl(self, pts, t):
        w = self._witness(pts, t)
        miss = np.isnan(w[:, 0])
        w[~miss] -= self.base.evaluate(pts[~miss], t)
        w[miss] = 0.0
        return w


def geodesic_transport(mu0: ParticleMeasure, mu1: ParticleMeasure,
                       delta: float, s: Region, snapshots: int = 11) -> Trajectory:
    """Constant-speed quadratic-cost interpolation from mu0 to mu1 inside s."""
    if not s.is_convex():
        raise ValueError("geodesic transport needs a convex region "
                         "(the interpolant could exit a non-convex one)")
    for name, m in (("source", mu0), ("target", mu1)):
        if not np.all(s.contains(m.positions)):
            raise ValueError(f"{name} support must sit inside the region")
    _, plan = wp_discrete(mu0, mu1, p=2)
    times = np.linspace(0.0, delta, snapshots)
    states = [displacement_interpolate(plan, t, delta) for t in times]
    endpoints = np.stack([plan.source.positions[plan.src_idx],
                          plan.target.positions[plan.tgt_idx]], axis=1)
    witness = ParticleWitnessField(
        np.array([0.0, delta]), endpoints, TimeField.zero(mu0.dim),
        label="geodesic",
        descriptor={"kind": "geodesic", "delta": delta,
                    "entries": len(plan.mass)})
    traj = Trajectory(times, states, field_ref=witness,
                      meta={"plan_entries": len(plan.mass),
                            "max_speed": float(np.max(np.linalg.norm(
                                (endpoints[:, 1] - endpoints[:, 0]) / delta,
                                axis=1))) if len(plan.mass) else 0.0})
    traj.plan = plan
    return traj


# ---------------------------------------------------------------------------
# five-phase composition helpers
# ---------------------------------------------------------------------------

@dataclass
class ControllerResult:
    schedule: ControlSchedule
    trajectory: Trajectory
    report: dict


def _largest_free_box(omega: Region, omega0: Region, shrink_frac=0.15) -> Region:
    """Largest axis-aligned slab of a box omega avoiding the box omega0."""
    if omega.kind != "box" or omega0.kind != "box":
        raise ValueError("storage-set placement needs box regions")
    best = None
    best_vol = -1.0
    for axis in range(omega.dim):
        for lo_a, hi_a in ((omega.lo[axis], omega0.lo[axis]),
                           (omega0.hi[axis], omega.hi[axis])):
            if hi_a - lo_a <= 0:
                continue
            lo = omega.lo.copy()
            hi = omega.hi.copy()
            lo[axis], hi[axis] = lo_a, hi_a
            vol = float(np.prod(hi - lo))
            if vol > best_vol and np.all(hi > lo):
                best_vol = vol
                best = (lo, hi)
    if best is None:
        raise ValueError("no room for a storage hypercube beside omega0")
    lo, hi = best
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 - shrink_frac)
    if np.any(half <= 0):
        raise ValueError("free slab degenerate after shrinking")
    return Region.box(c - half, c + half)


def _place_sets(omega: Region, omega0: Region):
    """S inside omega \\ omega0, S0 well inside S, omega1 around both."""
    s_box = _largest_free_box(omega, omega0)
    c = s_box.center_point()
    half = 0.5 * (s_box.hi - s_box.lo)
    s0 = Region.box(c - 0.5 * half, c + 0.5 * half)
    hull_lo = np.minimum(omega0.lo, s_box.lo)
    hull_hi = np.maximum(omega0.hi, s_box.hi)
    gap = min(np.min(hull_lo - omega.lo), np.min(omega.hi - hull_hi))
    if gap <= 0:
        raise ValueError("omega0 and S leave no room for omega1 inside omega")
    omega1 = Region.box(hull_lo - gap / 2, hull_hi + gap / 2)
    return s_box, s0, omega1, gap


class MovingFrameGridField(TimeField):
    """Grid control conjugated into a frame that tracks the two clouds.

    The moving-cell field lives in normalized coordinates where each cloud
    fills the unit box; the frame origin interpolates linearly and the frame
    scale geometrically between the two cloud boxes, so strongly squeezed
    clouds (the funnel output) still present the cell construction with
    order-one geometry. The world control is gated to a static region inside
    the storage hypercube.

    The world field's literal Lipschitz constant is dominated by the cell
    falloff bands, whose world width shrinks with the frame; stepping by it
    would be hopeless. Inside the gate core the conjugation is exact
    (pulled back, the field IS the normalized one), so ``advect`` integrates
    core particles in normalized coordinates and only the outside ones in
    world coordinates, where the field is mild.
    """

    def __init__(self, inner: GridControlField, v: TimeField, o0, s0, o1, s1,
                 t0, t1, gate_core: Region, band: float):
        self.inner = inner
        self.v = v
        self.o0 = np.asarray(o0, dtype=float)
        self.o1 = np.asarray(o1, dtype=float)
        self.s0 = np.asarray(s0, dtype=float)
        self.s1 = np.asarray(s1, dtype=float)
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.gate_core = gate_core
        self.band = float(band)
        self._gate = _blend_factor(gate_core, band)
        self._log_ratio = np.log(self.s1 / self.s0)
        span = self.t1 - self.t0
        drift_lip = float(np.max(np.abs(self._log_ratio))) / span
        sup = (inner.sup_bound * float(np.max(np.maximum(self.s0, self.s1)))
               + float(np.linalg.norm((self.o1 - self.o0) / span))
               + v.sup_bound)
        ratio = float(max(np.max(self.s0) / np.min(self.s0),
                          np.max(self.s1) / np.min(self.s1),
                          np.max(self.s1) / np.min(self.s0),
                          np.max(self.s0) / np.min(self.s1)))
        lip = inner.lipschitz_bound * ratio + drift_lip + \
            (sup + v.sup_bound) * 1.875 / band + v.lipschitz_bound
        super().__init__(self._eval, inner.dim, lipschitz_bound=lip,
                         sup_bound=sup, support_region=gate_core.inflate(band),
                         time_domain=(t0, t1), label="grid_frame",
                         control_fn=self._ctrl,
                         descriptor={"kind": "grid_frame",
                                     "inner": inner.descriptor,
                                     "o0": self.o0.tolist(), "s0": self.s0.tolist(),
                                     "o1": self.o1.tolist(), "s1": self.s1.tolist(),
                                     "gate": gate_core.to_dict(), "band": band})
        # the mild bound away from the cell margins, used for the world-side
        # integration of particles that never enter the gate core
        self.outer_lipschitz = drift_lip + \
            (sup + v.sup_bound) * 1.875 / band + v.lipschitz_bound

    def frame(self, t):
        span = self.t1 - self.t0
        tau = min(max((t - self.t0) / span, 0.0), 1.0)
        s = self.s0 * np.exp(tau * self._log_ratio)
        o = self.o0 + tau * (self.o1 - self.o0)
        odot = (self.o1 - self.o0) / span
        sdot = s * self._log_ratio / span
        return o, s, odot, sdot

    def world_grid_velocity(self, pts, t):
        o, s, odot, sdot = self.frame(t)
        y = (np.atleast_2d(pts) - o) / s
        return odot + sdot * y + s * self.inner.evaluate(y, t - self.t0)

    def _eval(self, pts, t):
        g = self._gate(pts)[:, None]
        return (g * self.world_grid_velocity(pts, t)
                + (1.0 - g) * self.v.evaluate(pts, t))

    def _ctrl(self, pts, t):
        g = self._gate(pts)[:, None]
        return g * (self.world_grid_velocity(pts, t) - self.v.evaluate(pts, t))

    def advect(self, mu: ParticleMeasure, ta: float, tb: float,
               tol: float) -> ParticleMeasure:
        """Flow of this field, via the exact conjugation for core particles."""
        core = self.gate_core.contains(mu.positions)
        pos = mu.positions.copy()
        if np.any(core):
            o_a, s_a, _, _ = self.frame(ta)
            o_b, s_b, _, _ = self.frame(tb)
            y = (pos[core] - o_a) / s_a
            inner_shifted = TimeField(
                lambda p, t: self.inner.evaluate(p, t),
                self.dim, self.inner.lipschitz_bound, self.inner.sup_bound,
                label="grid_norm")
            y = _integrate_batch_local(inner_shifted, y, ta - self.t0,
                                       tb - self.t0, tol)
            pos[core] = o_b + s_b * y
        if np.any(~core):
            outer_field = TimeField(self._eval, self.dim,
                                    lipschitz_bound=self.outer_lipschitz,
                                    sup_bound=self.sup_bound,
                                    label="grid_frame_outer")
            pos[~core] = _integrate_batch_local(outer_field, pos[~core],
                                                ta, tb, tol)
            inside_after = self.gate_core.contains(pos[~core])
            if np.any(inside_after):
                warnings.warn("a particle outside the gate core drifted into "
                              "it during the grid phase; its step control "
                              "used the mild outer bound", stacklevel=2)
        return ParticleMeasure(pos, mu.weights, mu.tags)


def _shift_time(field: TimeField, offset: float, v: TimeField) -> TimeField:
    """The same field with its clock started at ``offset`` (segment-local
    fields in a schedule)."""
    fld = TimeField(lambda pts, t: field.evaluate(pts, t - offset),
                    field.dim, field.lipschitz_bound, field.sup_bound,
                    support_region=field.support_region, label=field.label,
                    control_fn=lambda pts, t: field.control_part(pts, t - offset),
                    descriptor=field.descriptor)
    return fld


def _sample_sup_v(v: TimeField, bbox_lo, bbox_hi, seed=0, n=4096) -> float:
    if np.isfinite(v.sup_bound):
        return v.sup_bound
    rng = np.random.default_rng(seed)
    pts = bbox_lo + (bbox_hi - bbox_lo) * rng.random((n, len(bbox_lo)))
    return float(np.max(np.linalg.norm(v.evaluate(pts, 0.0), axis=1)))


def _escalate_storage(v: TimeField, omega0: Region, mu: ParticleMeasure,
                      horizon: float, mass_target: float, tol: float,
                      k_cap: int = FUNNEL_K_CAP):
    """Double the cutoff index until the mass left outside omega0 at the end
    of the storage phase is at most mass_target."""
    k = 2
    while 1.0 / k >= omega0.inradius():
        k *= 2
    while k <= k_cap:
        total = storage_total(v, omega0, k)
        state = flow_push(total, mu, 0.0, horizon, tol)
        outside = ~omega0.contains(state.positions)
        stray = float(np.sum(state.weights[outside]))
        if stray <= mass_target + 1e-15:
            return total, k, state, outside
        k *= 2
    raise RuntimeError(
        f"storage cutoff escalation exceeded {k_cap} with stray mass {stray:.3g} "
        f"> target {mass_target:.3g}")


def _select_untouched(state: ParticleMeasure, must_tag: np.ndarray,
                      depth: np.ndarray, target_mass: float) -> np.ndarray:
    """Boolean tag mask containing `must_tag` topped up (shallowest-first)
    until the tagged mass reaches target_mass within one particle weight."""
    tagged = must_tag.copy()
    mass = float(np.sum(state.weights[tagged]))
    order = np.argsort(depth, kind="stable")
    for idx in order:
        if mass >= target_mass - 0.5 * np.max(state.weights):
            break
        if not tagged[idx]:
            tagged[idx] = True
            mass += state.weights[idx]
    return tagged


def _choose_n(epsilon: float, lip_back: float, back_span: float,
              count: int, n_override=None):
    """Smallest n meeting the contraction-compensated grid target, capped by
    the resolution the particle count supports."""
    n_cap = max(3, min(64, int(math.isqrt(max(count, 9) // 25))))
    if n_override is not None:
        return int(n_override), None, True
    exponent = min(2.0 * lip_back * back_span, 700.0)
    target = epsilon / (2.0 * math.exp(exponent))
    for n in range(3, n_cap + 1):
        if grid_error_bound(n) <= target:
            return n, target, True
    return n_cap, target, False


def approx_controller(scenario, epsilon: float | None = None) -> ControllerResult:
    """Five-phase Lipschitz control: storage, funnel, grid, and the time
    reversals of a funnel and a storage synthesized on the reversed drift.

    Tags an untouched particle set of mass eps/(2 d Rbar) on each side,
    simulates the full schedule and reports the measured transport error
    against the target.
    """
    from .scenarios import Scenario

    if isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)
    epsilon = float(epsilon if epsilon is not None else scenario.params["epsilon"])
    tol = float(scenario.params.get("tol", 1e-6))
    delta = float(scenario.params["delta"])
    v = scenario.velocity_field()
    omega = scenario.omega_region()
    mu0 = scenario.measure("mu0")
    mu1 = scenario.measure("mu1")
    horizon = float(scenario.params.get("horizon", 20.0))

    cond = check_geometric_condition(v, mu0, mu1, omega, horizon, tol)
    # token minimum lengths keep every segment well-posed when a support
    # already sits inside the control region
    t1 = max(cond.T0star, 1e-3)
    t_back_store = max(cond.T1star, 1e-3)
    t2 = t1 + delta / 3.0
    t3 = t1 + 2.0 * delta / 3.0
    t4 = t1 + delta
    t5 = t4 + t_back_store
    times = {"T0": 0.0, "T1": t1, "T2": t2, "T3": t3, "T4": t4, "T5": t5}

    lo0, hi0 = mu0.support_bbox()
    lo1, hi1 = mu1.support_bbox()
    edge = float(np.max(np.maximum(hi0, hi1) - np.minimum(lo0, lo1)))
    sup_v = _sample_sup_v(v, np.minimum(lo0, lo1) - 1.0, np.maximum(hi0, hi1) + 1.0)
    rbar = edge + t5 * sup_v
    eps_mass = epsilon / (2.0 * mu0.dim * rbar)

    s_box, s0, omega1, gap = _place_sets(omega, cond.omega0)

    # phase 1 forward: storage along v
    store_fwd, k_fwd, state1_all, stray_fwd = _escalate_storage(
        v, cond.omega0, mu0, t1, eps_mass, tol)
    depth_fwd = cond.omega0.depth(state1_all.positions)
    tag_fwd = _select_untouched(state1_all, stray_fwd, depth_fwd, eps_mass)
    tags0 = np.where(tag_fwd, "untouched", "").astype(object)
    mu0_tagged = mu0.with_tags(tags0)
    state1 = state1_all.with_tags(tags0)

    # backward lane on the reversed drift
    v_back = v.negated()
    store_back, k_back, back1_all, stray_back = _escalate_storage(
        v_back, cond.omega0, mu1, t_back_store, eps_mass, tol)
    depth_back = cond.omega0.depth(back1_all.positions)
    tag_back = _select_untouched(back1_all, stray_back, depth_back, eps_mass)
    tags1 = np.where(tag_back, "untouched", "").astype(object)
    mu1_tagged = mu1.with_tags(tags1)
    back1 = back1_all.with_tags(tags1)

    # phase 2 on each lane: a straight-line funnel into s0 (omega1 is a box;
    # the affine similarity keeps the cloud shape, so the grid phase sees
    # well-conditioned quantiles)
    def cloud_box_of(cloud):
        lo, hi = cloud.support_bbox()
        pad = 0.01 * np.maximum(hi - lo, 1e-9)
        return Region.box(lo - pad, hi + pad)

    fun_back = affine_funnel_total(
        v_back, omega1, cloud_box_of(back1.subset(~tag_back)), s0,
        t4 - t3, blend_band=0.45 * gap)
    back2_all = flow_push(fun_back, back1, 0.0, t4 - t3, tol)
    grid_target_cloud = back2_all.subset(~tag_back)
    if not np.all(s0.contains(grid_target_cloud.positions)):
        raise RuntimeError("backward funnel failed to reach the storage cube")

    fun_fwd = affine_funnel_total(
        v, omega1, cloud_box_of(state1.subset(~tag_fwd)), s0,
        t2 - t1, blend_band=0.45 * gap)
    state2_all = flow_push(fun_fwd, state1, 0.0, t2 - t1, tol)
    grid_source_cloud = state2_all.subset(~tag_fwd)
    if not np.all(s0.contains(grid_source_cloud.positions)):
        raise RuntimeError("forward funnel failed to reach the storage cube")

    # phase 3: grid control between the two parked clouds, in normalized
    # coordinates of a box inside S
    n, n_target, n_met = _choose_n(
        epsilon,
        max(fun_back.lipschitz_bound, store_back.lipschitz_bound),
        t5 - t3, len(grid_source_cloud), scenario.params.get("n"))

    def cloud_frame(cloud):
        lo, hi = cloud.support_bbox()
        span = np.maximum(hi - lo, 1e-13)
        return lo - 0.02 * span, 1.04 * span

    o0, s0n = cloud_frame(grid_source_cloud)
    o1, s1n = cloud_frame(grid_target_cloud)
    norm_src = ParticleMeasure((grid_source_cloud.positions - o0) / s0n,
                               grid_source_cloud.weights)
    norm_tgt = ParticleMeasure((grid_target_cloud.positions - o1) / s1n,
                               grid_target_cloud.weights)
    while True:
        try:
            part_src, part_tgt = quantile_partition(norm_src.normalized(),
                                                    norm_tgt.normalized(), n)
            break
        except ValueError:
            # empirical resolution insufficient for this mesh; coarsen
            if scenario.params.get("n") is not None or n <= 3:
                raise
            n -= 1
    grid_norm = grid_control(part_src, part_tgt, t3 - t2)
    pad = 0.25
    hull_lo = np.minimum(o0 - pad * s0n, o1 - pad * s1n)
    hull_hi = np.maximum(o0 + (1 + pad) * s0n, o1 + (1 + pad) * s1n)
    room = float(np.min(np.minimum(hull_lo - s_box.lo, s_box.hi - hull_hi)))
    if room <= 0:
        raise RuntimeError("parked clouds leave no gating room inside S")
    gate_region = Region.box(hull_lo - room / 3, hull_hi + room / 3)
    grid_total = MovingFrameGridField(grid_norm, v, o0, s0n, o1, s1n,
                                      t2, t3, gate_region, band=room / 3)
    state3_all = grid_total.advect(state2_all, t2, t3, tol)

    # phases 4 and 5: time reversals of the backward synthesis. Reversing a
    # time-dependent segment of length D maps the field w to -w(x, D - t).
    def rev_shifted(fld, duration, offset, descriptor):
        def rev_fn(pts, t):
            return -fld.evaluate(pts, duration - (t - offset))

        return TimeField(rev_fn, fld.dim, fld.lipschitz_bound, fld.sup_bound,
                         support_region=fld.support_region,
                         label=f"rev({fld.label})",
                         control_fn=lambda pts, t: rev_fn(pts, t) - v.evaluate(pts, t),
                         descriptor=descriptor)

    fun_rev = rev_shifted(fun_back, t4 - t3, t3,
                          {"kind": "funnel_reversed",
                           "inner": fun_back.descriptor})
    store_rev = store_back.negated()
    store_rev.control_fn = lambda pts, t: store_rev.evaluate(pts, t) - v.evaluate(pts, t)
    store_rev.descriptor = {"kind": "storage_reversed",
                            "inner": store_back.descriptor}
    state4_all = flow_push(fun_rev, state3_all, t3, t4, tol)
    state5_all = flow_push(store_rev, state4_all, t4, t5, tol)

    fun_fwd_seg = _shift_time(fun_fwd, t1, v)
    segments = [
        ControlSegment(0.0, t1, store_fwd, "storage"),
        ControlSegment(t1, t2, fun_fwd_seg, "funnel"),
        ControlSegment(t2, t3, grid_total, "grid"),
        ControlSegment(t3, t4, fun_rev, "funnel"),
        ControlSegment(t4, t5, store_rev, "storage"),
    ]
    schedule = ControlSchedule(segments)
    traj = Trajectory(
        np.array([0.0, t1, t2, t3, t4, t5]),
        [mu0_tagged, state1, state2_all, state3_all, state4_all, state5_all],
        field_ref=schedule, meta={"mode": "approx"})

    w1 = subsampled_w1(state5_all.with_tags(None), mu1.with_tags(None),
                       seed=int(scenario.params.get("seed", 0)))
    report = {
        "mode": "approx",
        "epsilon": epsilon,
        "final_w1": w1,
        "times": times,
        "T0star": cond.T0star,
        "T1star": cond.T1star,
        "storage_k": {"forward": k_fwd, "backward": k_back},
        "funnel": {"forward_ratios": fun_fwd.ratios.tolist(),
                   "backward_ratios": fun_back.ratios.tolist(),
                   "backward_expansion": fun_back.expansion},
        "grid_n": n,
        "grid_bound": grid_error_bound(n),
        "grid_bound_target": n_target,
        "grid_bound_met": n_met,
        "untouched": {
            "target_mass": eps_mass,
            "rbar": rbar,
            "tagged_mass_source": float(np.sum(state1_all.weights[tag_fwd])),
            "tagged_mass_target": float(np.sum(back1_all.weights[tag_back])),
            "count_source": int(np.sum(tag_fwd)),
            "count_target": int(np.sum(tag_back)),
        },
        "mass_total": state5_all.total_mass(),
        "regions": {"omega0": cond.omega0.to_dict(), "S": s_box.to_dict(),
                    "S0": s0.to_dict(), "omega1": omega1.to_dict()},
    }
    return ControllerResult(schedule, traj, report)


# ---------------------------------------------------------------------------
# exact controller (stopped flows + geodesic, per-atom witness)
# ---------------------------------------------------------------------------

def _resample_path(knots, path, new_knots):
    out = np.empty((len(new_knots), path.shape[1]))
    for a in range(path.shape[1]):
        out[:, a] = np.interp(new_knots, knots, path[:, a])
    return out


def _stopped_paths(field, stop_region, pts, horizon, tol, n_knots=33):
    """Stopped-flow paths resampled on a uniform knot grid, exact endpoints."""
    end, hits, knots, raw = stopped_flow_batch(field, stop_region, pts, 0.0,
                                               horizon, tol, record=True)
    if np.any(np.isnan(hits)):
        bad = int(np.flatnonzero(np.isnan(hits))[0])
        raise RuntimeError(f"point {pts[bad].tolist()} failed to reach the "
                           "stop region; escalate first")
    new_knots = np.linspace(0.0, horizon, n_knots)
    paths = np.stack([_resample_path(knots, raw[e], new_knots)
                      for e in range(raw.shape[0])])
    paths[:, 0, :] = pts
    paths[:, -1, :] = end
    return end, hits, new_knots, paths


def _escalate_exact_funnel(v, omega1, s0, delta, pts, tol, blend_band):
    """Gradient-ascent gain for the parked variant: total field k grad(eta)
    inside omega1, particles freeze at first entry into s0."""
    eta, kappa0, kappa1 = weight_eta(omega1, s0)
    blend = _blend_factor(omega1, blend_band)
    grad_lip = _eta_grad_lipschitz(eta, omega1)
    eta.grad_lipschitz = grad_lip
    shell = _layer_max_grad(eta, omega1, blend_band, outside=False)

    def make_field(k):
        def total(p, t, k=k):
            b = blend(p)[:, None]
            return b * (float(k) * eta.gradient(p)) + (1.0 - b) * v.evaluate(p, t)

        return TimeField(total, v.dim,
                         lipschitz_bound=k * grad_lip + v.lipschitz_bound
                         + (k * shell + v.sup_bound) * 1.875 / blend_band,
                         sup_bound=k * kappa1 + v.sup_bound,
                         label=f"exact_funnel_k{k}",
                         descriptor={"kind": "funnel_exact", "k": k})

    # hitting times scale like 1/k (the ascent lines are gain-independent)
    probe_horizon = 8.0 * delta
    tau_max = None
    while probe_horizon <= 512.0 * delta:
        _, hits = stopped_flow_batch(make_field(1), s0, pts, 0.0,
                                     probe_horizon, tol)
        if not np.any(np.isnan(hits)):
            tau_max = float(np.max(hits))
            break
        probe_horizon *= 8.0
    if tau_max is None:
        raise RuntimeError("funnel probe found stranded points; the geometry "
                           "likely violates s0 strictly inside omega1")
    k = max(1, 2 ** math.ceil(math.log2(max(tau_max, 1e-12) / (0.9 * delta))))
    while k <= FUNNEL_K_CAP:
        fld = make_field(k)
        try:
            end, hits, knots, paths = _stopped_paths(fld, s0, pts, delta, tol)
        except RuntimeError:
            k *= 2
            continue
        if np.max(hits) < delta * (1 - 1e-9):
            return fld, k, end, knots, paths
        k *= 2
    raise RuntimeError(f"exact funnel escalation exceeded {FUNNEL_K_CAP}")


def exact_controller(scenario) -> ControllerResult:
    """Atom-exact steering: park along the drift, funnel-park into S0, ride
    the quadratic-cost geodesic, then replay the target-side construction
    backwards. The composite control is stored as a per-plan-entry witness.
    """
    from .scenarios import Scenario

    if isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)
    tol = float(scenario.params.get("tol", 1e-6))
    delta = float(scenario.params["delta"])
    v = scenario.velocity_field()
    omega = scenario.omega_region()
    mu0 = scenario.measure("mu0")
    mu1 = scenario.measure("mu1")
    horizon = float(scenario.params.get("horizon", 20.0))

    cond = check_geometric_condition(v, mu0, mu1, omega, horizon, tol)
    t1 = max(cond.T0star, 1e-3)
    t_back = max(cond.T1star, 1e-3)
    t2 = t1 + delta / 3.0
    t3 = t1 + 2.0 * delta / 3.0
    t4 = t1 + delta
    t5 = t4 + t_back
    s_box, s0, omega1, gap = _place_sets(omega, cond.omega0)
    band = 0.45 * gap

    # forward lane: park in omega0, then funnel-park into s0
    _, _, knots1, paths1 = _stopped_paths(v, cond.omega0, mu0.positions, t1, tol)
    fwd_parked = paths1[:, -1, :]
    fun_fwd, k_fun_fwd, fwd_in_s0, knots2, paths2 = _escalate_exact_funnel(
        v, omega1, s0, t2 - t1, fwd_parked, tol, band)

    # backward lane on the reversed drift, recorded for replay
    v_back = v.negated()
    _, _, knots5, paths5 = _stopped_paths(v_back, cond.omega0, mu1.positions,
                                          t_back, tol)
    back_parked = paths5[:, -1, :]
    fun_back, k_fun_back, back_in_s0, knots4, paths4 = _escalate_exact_funnel(
        v_back, omega1, s0, t4 - t3, back_parked, tol, band)

    # geodesic plan between the parked clouds
    src_cloud = ParticleMeasure(fwd_in_s0, mu0.weights)
    tgt_cloud = ParticleMeasure(back_in_s0, mu1.weights)
    _, plan = wp_discrete(src_cloud, tgt_cloud, p=2)
    e_src = plan.src_idx
    e_tgt = plan.tgt_idx

    # per-entry composite paths over [0, T5]
    seg_knots = [knots1 + 0.0, t1 + knots2, np.array([t2, t3]),
                 t3 + (knots4[-1] - knots4[::-1]), t4 + (knots5[-1] - knots5[::-1])]
    seg_paths = [paths1[e_src], paths2[e_src],
                 np.stack([fwd_in_s0[e_src], back_in_s0[e_tgt]], axis=1),
                 paths4[e_tgt][:, ::-1, :], paths5[e_tgt][:, ::-1, :]]
    knit_times = []
    knit_paths = []
    for kt, kp in zip(seg_knots, seg_paths):
        if knit_times:
            kt = kt[1:]
            kp = kp[:, 1:, :]
        knit_times.append(kt)
        knit_paths.append(kp)
    all_knots = np.concatenate(knit_times)
    all_paths = np.concatenate(knit_paths, axis=1)

    witness_segments = []
    labels = ["storage", "funnel", "geodesic", "funnel", "storage"]
    bounds = [0.0, t1, t2, t3, t4, t5]
    descriptors = [
        {"kind": "stopped_drift", "omega0": cond.omega0.to_dict()},
        {"kind": "funnel_exact", "k": k_fun_fwd, "s0": s0.to_dict()},
        {"kind": "geodesic", "entries": len(plan.mass)},
        {"kind": "funnel_exact_reversed", "k": k_fun_back},
        {"kind": "stopped_drift_reversed"},
    ]
    for label, lo, hi, desc in zip(labels, bounds[:-1], bounds[1:], descriptors):
        keep = (all_knots >= lo - 1e-12) & (all_knots <= hi + 1e-12)
        wf = ParticleWitnessField(all_knots[keep], all_paths[:, keep, :], v,
                                  label=f"witness_{label}", descriptor=desc)
        witness_segments.append(ControlSegment(lo, hi, wf, label))
    schedule = ControlSchedule(witness_segments)

    snap_times = np.unique(np.concatenate([
        np.array(bounds), np.linspace(0.0, t5, 21)]))
    entry_w = plan.mass
    states = []
    for t in snap_times:
        j = np.clip(np.searchsorted(all_knots, t, side="right") - 1, 0,
                    len(all_knots) - 2)
        lam = 0.0 if all_knots[j + 1] == all_knots[j] else (
            (t - all_knots[j]) / (all_knots[j + 1] - all_knots[j]))
        pos = (1 - lam) * all_paths[:, j, :] + lam * all_paths[:, j + 1, :]
        states.append(ParticleMeasure(pos, entry_w))
    traj = Trajectory(snap_times, states, field_ref=schedule,
                      meta={"mode": "exact", "plan_entries": len(plan.mass)})
    traj.plan = plan

    final = states[-1].merged_coincident()
    final_w1, _ = wp_discrete(final, mu1, p=1)
    report = {
        "mode": "exact",
        "final_w1": {"estimate": final_w1, "method": "exact"},
        "times": {"T0": 0.0, "T1": t1, "T2": t2, "T3": t3, "T4": t4, "T5": t5},
        "T0star": cond.T0star,
        "T1star": cond.T1star,
        "funnel_k": {"forward": k_fun_fwd, "backward": k_fun_back},
        "plan_entries": int(len(plan.mass)),
        "mass_total": states[-1].total_mass(),
        "regions": {"omega0": cond.omega0.to_dict(), "S": s_box.to_dict(),
                    "S0": s0.to_dict(), "omega1": omega1.to_dict()},
    }
    return ControllerResult(schedule, traj, report)


# ---------------------------------------------------------------------------
# negative-result diagnostics
# ---------------------------------------------------------------------------

def bv_blowup_diagnostic(traj: Trajectory, pair: tuple[int, int],
                         max_halvings: int = 20) -> dict:
    """Lower-bound accumulation of the one-sided derivative integral along a
    merging pair.

    Along trajectories y, z of the same field, the integral of
    |(u(y)-u(z))/(y-z)| equals the total variation of log|y-z|, which the
    table accumulates exactly (telescoping) on the recorded snapshots. Rows
    report the value each time the gap first halves.
    """
    i, j = pair
    gaps = np.array([abs(s.positions[i, 0] - s.positions[j, 0])
                     for s in traj.states])
    if np.any(gaps <= 0):
        cut = int(np.argmax(gaps <= 0))
        gaps = gaps[:cut]
    if len(gaps) < 2:
        return {"rows": [], "merged": False, "note": "no merge detected"}
    logg = np.log(gaps)
    acc = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(logg)))])
    rows = []
    g0 = gaps[0]
    for m in range(1, max_halvings + 1):
        cutoff = g0 * 2.0 ** (-m)
        hit = np.flatnonzero(gaps <= cutoff)
        if len(hit) == 0:
            break
        k = int(hit[0])
        rows.append({"halvings": m, "gap": float(gaps[k]),
                     "integral": float(acc[k])})
    if not rows:
        return {"rows": [], "merged": False, "note": "no merge detected"}
    return {"rows": rows, "merged": True, "initial_gap": float(g0)}


def linear_merge_toy(halvings: int = 12, samples_per_halving: int = 24) -> Trajectory:
    """Two straight-line particles approaching at constant speed; gap halves
    every fixed time fraction of the remaining distance to the merge time."""
    t_end = 1.0 - 2.0 ** (-halvings - 2)
    times = 1.0 - np.geomspace(1.0, 1.0 - t_end, halvings * samples_per_halving)
    times = np.concatenate([[0.0], times[1:]])
    states = []
    for t in times:
        gap = 1.0 - t
        states.append(ParticleMeasure(np.array([[0.5 * gap], [-0.5 * gap]]),
                                      np.array([0.5, 0.5])))
    return Trajectory(times, states, field_ref="linear-merge-toy")


def shear_diagnostic(n_values=(2, 4, 8), probes: int = 7) -> dict:
    """Velocity mismatch of the naive map that sends full outer cells onto
    their targets; the swapped two-by-two configuration makes the jump across
    the interior column line explicit."""
    a_cols = np.array([0.0, 0.5, 1.0])
    a_rows = np.array([[0.0, 0.8, 1.0], [0.0, 0.2, 1.0]])
    b_rows = np.array([[0.0, 0.2, 1.0], [0.0, 0.8, 1.0]])

    def naive_velocity(x, y):
        i = 0 if x < a_cols[1] else 1
        j = 0 if y < a_rows[i, 1] else 1
        lo, hi = a_rows[i, j], a_rows[i, j + 1]
        tlo, thi = b_rows[i, j], b_rows[i, j + 1]
        image = tlo + (y - lo) * (thi - tlo) / (hi - lo)
        return image - y  # T = 1

    ys = np.linspace(0.05, 0.95, probes)
    jump_rows = []
    for y in ys:
        left = naive_velocity(a_cols[1] - 1e-9, y)
        right = naive_velocity(a_cols[1] + 1e-9, y)
        jump_rows.append({"y": float(y), "jump": float(abs(right - left))})
    max_jump = max(r["jump"] for r in jump_rows)

    lips = []
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        worst = 0.0
        for y in ys:
            du = abs(naive_velocity(a_cols[1] + eps, y)
                     - naive_velocity(a_cols[1] - eps, y))
            worst = max(worst, du / (2 * eps))
        lips.append({"epsilon": eps, "lipschitz_estimate": worst})
    return {"config": "swapped-2x2", "jumps": jump_rows, "max_jump": max_jump,
            "lipschitz_table": lips}
