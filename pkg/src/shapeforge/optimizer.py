"""Optimization driver: an augmented-Lagrange outer loop around a
box-constrained limited-memory quasi-Newton inner loop over the two
controls.

The inner metric couples the obstacle-trace mass matrix (boundary control)
with the domain mass matrix masked by the active-set indicator for the
box-constrained coefficient field. Candidate steps are safeguarded: a step
whose displacement inverts too much of the mesh, or whose objective fails
to evaluate to a finite number, is halved a bounded number of times and
then the inner loop aborts with the best iterate found.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .adjoint import GradientEvaluator
from .extension import ControlState, initial_control, project_eta
from .flow import InvalidTransformError, NonlinearSolveError
from .solvers import SolverError

logger = logging.getLogger("shapeforge.optimizer")

CSV_HEADER = "step,J_aug,j,g_def_norm,lambda_norm,tau,min_detDF,grad_norm,event"


@dataclass
class OptimizerSettings:
    tau0: float = 1.0
    tau_inc: float = 2.0
    lam_inc: float = 1.0
    eps_g: float = 1e-3
    eps_inner: float = 1e-4
    eps_outer: float = 1e-5
    max_inner: int = 100
    max_outer: int = 30
    max_total_steps: int | None = None
    memory: int = 10
    sigma: float = 1e-8
    safeguard_max_halvings: int = 5
    safeguard_invert_fraction: float = 0.10
    descent_max_halvings: int = 12


@dataclass
class StepRecord:
    step: int
    j_aug: float
    j: float
    g_def_norm: float
    lambda_norm: float
    tau: float
    min_det: float
    grad_norm: float
    event: str = ""

    def add_event(self, tag):
        self.event = tag if not self.event else self.event + ";" + tag

    def csv_row(self):
        return ",".join([
            str(self.step),
            repr(float(self.j_aug)),
            repr(float(self.j)),
            repr(float(self.g_def_norm)),
            repr(float(self.lambda_norm)),
            repr(float(self.tau)),
            repr(float(self.min_det)),
            repr(float(self.grad_norm)),
            self.event,
        ])


class ControlInnerProduct:
    """Inner product on control space: obstacle-trace mass for u, domain
    mass for eta, with an optional nodal mask on the eta block."""

    def __init__(self, mass_obstacle, mass_domain):
        self.mg = mass_obstacle.tocsr()
        self.m = mass_domain.tocsr()

    def dot(self, au, ae, bu, be, chi=None):
        val = float(au @ (self.mg @ bu))
        if chi is None:
            val += float(ae @ (self.m @ be))
        else:
            val += float((chi * ae) @ (self.m @ (chi * be)))
        return val

    def norm(self, du, de, chi=None):
        return float(np.sqrt(max(0.0, self.dot(du, de, du, de, chi))))


def active_mask(eta, grad_eta, lower, upper, sigma):
    """1 where a short gradient step stays inside the box, 0 where it would
    leave (the bound is active and pushing outward)."""
    trial = eta - sigma * grad_eta
    return ((trial >= lower) & (trial <= upper)).astype(float)


@dataclass
class ControlPair:
    u: np.ndarray
    eta: np.ndarray

    @staticmethod
    def of(u, eta):
        return ControlPair(np.asarray(u, dtype=float), np.asarray(eta, dtype=float))


class LbfgsMemory:
    """Curvature pairs (control difference, gradient difference), newest
    last, bounded length."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.pairs = []

    def __len__(self):
        return len(self.pairs)

    def clear(self):
        self.pairs.clear()

    def push(self, s, z, ip, chi):
        """Store a pair unless its curvature in the masked metric is not
        positive; returns True when stored."""
        curv = ip.dot(s.u, s.eta, z.u, z.eta, chi)
        if not np.isfinite(curv) or curv <= 0.0:
            logger.warning("skipping curvature pair with s.z = %.3e", curv)
            return False
        self.pairs.append((s, z))
        if len(self.pairs) > self.capacity:
            self.pairs.pop(0)
        return True


def lbfgs_direction(grad_u, grad_eta, memory, ip, chi):
    """Two-loop recursion in the masked metric. With no usable pairs the
    direction is the raw negative gradient (unit scaling)."""
    qu, qe = -grad_u.copy(), -grad_eta.copy()
    usable = []
    for s, z in memory.pairs:
        rho_den = ip.dot(z.u, z.eta, s.u, s.eta, chi)
        if np.isfinite(rho_den) and rho_den > 0.0:
            usable.append((s, z, 1.0 / rho_den))
    if not usable:
        return qu, qe
    alphas = []
    for s, z, rho in reversed(usable):
        a = rho * ip.dot(s.u, s.eta, qu, qe, chi)
        qu -= a * z.u
        qe -= a * z.eta
        alphas.append(a)
    alphas.reverse()
    s, z, _ = usable[-1]
    gamma = ip.dot(s.u, s.eta, z.u, z.eta, chi) / ip.dot(z.u, z.eta, z.u, z.eta, chi)
    qu *= gamma
    qe *= gamma
    for (s, z, rho), a in zip(usable, alphas):
        b = rho * ip.dot(z.u, z.eta, qu, qe, chi)
        qu += (a - b) * s.u
        qe += (a - b) * s.eta
    return qu, qe


@dataclass
class InnerResult:
    control: ControlState
    bundle: object
    steps: int
    converged: bool
    failed: bool


@dataclass
class OptimizationResult:
    control: ControlState
    bundle: object
    records: list
    lam_g: np.ndarray
    tau: float
    converged: bool
    failed: bool
    total_steps: int
    outer_iterations: int

    def csv_lines(self):
        return [CSV_HEADER] + [r.csv_row() for r in self.records]


class OptimizationDriver:
    """Runs the two-level optimization on one evaluator and keeps the step
    history."""

    def __init__(self, evaluator: GradientEvaluator, settings: OptimizerSettings):
        self.ev = evaluator
        self.settings = settings
        self.ip = ControlInnerProduct(evaluator.mass_obstacle,
                                      evaluator.mass_domain)
        self.records = []
        # remembered step scale for raw steepest-descent steps (taken with
        # an empty curvature memory, i.e. right after every outer update);
        # without it each round rediscovers the same halvings once the
        # penalty weight is large
        self._steepest_scale = 1.0

    def _grad_norm(self, control, bundle):
        p = self.ev.params
        pg_eta = project_eta(control.eta - bundle.grad_eta,
                             p.eta_lb, p.eta_ub) - control.eta
        return self.ip.norm(bundle.grad_u, pg_eta)

    def _record(self, bundle, lam_g, tau, grad_norm, event=""):
        bd = bundle.breakdown
        rec = StepRecord(
            step=len(self.records),
            j_aug=bd.j_aug,
            j=bd.j,
            g_def_norm=float(np.linalg.norm(bd.g_def)),
            lambda_norm=float(np.linalg.norm(lam_g)),
            tau=float(tau),
            min_det=float(bundle.min_det),
            grad_norm=float(grad_norm),
            event=event,
        )
        self.records.append(rec)
        return rec

    def _try_candidate(self, control, lam_g, tau, warm, j_ref):
        """Forward evaluation with the safeguard checks. Returns (forward
        tuple or None, reason), where the reason on rejection is "invalid"
        (geometry inverted or a solve failed) or "increase" (the augmented
        objective did not decrease)."""
        try:
            ext, flow, ts, bd = self.ev.forward(
                control.u, control.eta, lam_g, tau,
                warm_w=warm[0], warm_x=warm[1])
        except (InvalidTransformError, NonlinearSolveError, SolverError):
            return None, "invalid"
        fraction_inverted = float(np.mean(ts.det <= 0.0))
        if fraction_inverted > self.settings.safeguard_invert_fraction:
            return None, "invalid"
        if not np.isfinite(bd.j_aug):
            return None, "invalid"
        if bd.j_aug > j_ref + 1e-10 * max(1.0, abs(j_ref)):
            return None, "increase"
        return (ext, flow, ts, bd), "ok"

    def _search_step(self, control, qu, qe, lam_g, tau, warm, j_ref,
                     initial_scale=1.0):
        """Halve the step until the candidate is valid and decreases the
        augmented objective. Invalid geometry gets the bounded safeguard
        budget; mere non-descent may halve further."""
        st = self.settings
        p = self.ev.params
        scale = initial_scale
        cand = None
        reason = "increase"
        for halvings in range(st.descent_max_halvings + 1):
            cand = ControlState(
                control.u + scale * qu,
                project_eta(control.eta + scale * qe, p.eta_lb, p.eta_ub))
            forward, reason = self._try_candidate(cand, lam_g, tau, warm, j_ref)
            if forward is not None:
                return cand, forward, halvings, reason
            if reason == "invalid" and halvings >= st.safeguard_max_halvings:
                return cand, None, halvings, reason
            scale *= 0.5
        return cand, None, st.descent_max_halvings, reason

    def inner_loop(self, control, lam_g, tau, memory, budget_left,
                   reuse=None):
        st = self.settings
        p = self.ev.params
        # reuse carries the forward state of the previous round's last
        # bundle; the control is unchanged across the outer update, so only
        # the objective terms and the adjoints need recomputing
        bundle = self.ev.evaluate(control.u, control.eta, lam_g, tau,
                                  forward_state=reuse)
        prev = None
        steps = 0
        converged = False
        failed = False
        pending_event = ""
        while True:
            grad_norm = self._grad_norm(control, bundle)
            rec = self._record(bundle, lam_g, tau, grad_norm, pending_event)
            pending_event = ""
            if grad_norm < st.eps_inner:
                converged = True
                break
            if steps >= st.max_inner or budget_left - steps <= 0:
                break
            chi = active_mask(control.eta, bundle.grad_eta,
                              p.eta_lb, p.eta_ub, st.sigma)
            if prev is not None:
                s = ControlPair.of(control.u - prev[0].u,
                                   control.eta - prev[0].eta)
                z = ControlPair.of(bundle.grad_u - prev[1].grad_u,
                                   bundle.grad_eta - prev[1].grad_eta)
                memory.push(s, z, self.ip, chi)
            qu, qe = lbfgs_direction(bundle.grad_u, bundle.grad_eta,
                                     memory, self.ip, chi)
            steepest = len(memory) == 0
            scale0 = self._steepest_scale if steepest else 1.0
            prev = (ControlState(control.u.copy(), control.eta.copy()), bundle)
            warm = (bundle.w, bundle.flow.x)
            cand, forward, halvings, reason = self._search_step(
                control, qu, qe, lam_g, tau, warm, bundle.breakdown.j_aug,
                scale0)
            if forward is None and len(memory):
                # retry once from a fresh steepest-descent direction
                memory.clear()
                steepest = True
                scale0 = self._steepest_scale
                qu, qe = -bundle.grad_u, -bundle.grad_eta
                cand, forward, halvings, reason = self._search_step(
                    control, qu, qe, lam_g, tau, warm, bundle.breakdown.j_aug,
                    scale0)
            if forward is None:
                if reason == "invalid":
                    logger.warning("safeguard exhausted; aborting inner loop")
                    rec.add_event("fail")
                    failed = True
                else:
                    logger.info("no descent step found; handing back to the "
                                "outer loop")
                    rec.add_event("stall")
                break
            if halvings:
                logger.info("safeguard halved the step %d time(s)", halvings)
                pending_event = f"safeguard:{halvings}"
            if steepest:
                # remember the accepted scale, letting it grow back slowly
                self._steepest_scale = min(1.0, 2.0 * scale0 * 0.5 ** halvings)
            control = cand
            bundle = self.ev.evaluate(cand.u, cand.eta, lam_g, tau,
                                      forward_state=forward)
            steps += 1
        return InnerResult(control, bundle, steps, converged, failed)

    def run(self, control0=None):
        st = self.settings
        control = control0.copy() if control0 is not None \
            else initial_control(self.ev.ctx, self.ev.params.eta_mid)
        lam_g = np.zeros(3)
        tau = float(st.tau0)
        memory = LbfgsMemory(st.memory)
        budget = st.max_total_steps if st.max_total_steps is not None \
            else st.max_inner * st.max_outer
        total = 0
        converged_outer = False
        failed = False
        u_prev = None
        outer = 0
        bundle = None
        for outer in range(1, st.max_outer + 1):
            reuse = None if bundle is None \
                else (bundle.ext, bundle.flow, bundle.transform)
            res = self.inner_loop(control, lam_g, tau, memory,
                                  budget - total, reuse)
            control, bundle = res.control, res.bundle
            total += res.steps
            failed = failed or res.failed
            g_def = bundle.g_def
            if float(np.linalg.norm(g_def)) < st.eps_g:
                tau *= st.tau_inc
                self.records[-1].add_event("tau")
            else:
                lam_g = lam_g + st.lam_inc * g_def
                self.records[-1].add_event("lambda")
            memory.clear()
            if failed:
                break
            if u_prev is not None:
                drift = float(np.sqrt(max(0.0, (control.u - u_prev)
                                          @ (self.ev.mass_obstacle @ (control.u - u_prev)))))
                if drift < st.eps_outer:
                    converged_outer = True
                    break
            u_prev = control.u.copy()
            if budget - total <= 0:
                break
        return OptimizationResult(
            control=control, bundle=bundle, records=self.records,
            lam_g=lam_g, tau=tau, converged=converged_outer, failed=failed,
            total_steps=total, outer_iterations=outer)
