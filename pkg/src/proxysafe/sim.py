"""Fixed-step closed-loop simulation.

One run integrates, as a single ODE, the true plant chain, the virtual
proxy chain that the safety filter steers, and whatever extra states the
selected tracking controller carries (adaptive estimates, observer and
filter-chain states).  The integrator is classical fixed-step RK4 with
every control signal recomputed at every stage, matching a
continuous-time analysis; an optional hold interval freezes the control
outputs between updates for robustness studies.

Each grid point is logged with the barrier values, the filter constraint
row and its margin, the funnel, and the controller internals, and the
run ends with a verdict: SAFE when every barrier stayed above -1e-6 and
the tracking error stayed inside the funnel (within 1e-9), UNSAFE when
either failed, ABORTED (with the reason and the partial trace) when the
loop broke down before the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from proxysafe.barrier import build_barrier_stack, check_conditions
from proxysafe.controllers import (
    BarrierBreach, FunnelBreach, NussbaumState, SingularGain,
    build_dob_backstepping, build_nominal, eval_dob_backstepping,
    initialize_funnels, nussbaum_control, ppc_control,
)
from proxysafe.dob import DobChainState, dob_derivative, filter_derivative
from proxysafe.expr import EvalError, compile_expr
from proxysafe.filter import FEAS_TOL, Infeasible, project_halfspace, \
    solve_cbf_qp_pair
from proxysafe.scenario import ScenarioError, ScenarioSpec

__all__ = ["CheckFailed", "SimTrace", "RuntimeModel", "rk4_step", "simulate"]

H_TOL = 1e-6     # verdict slack on the barrier values
E_TOL = 1e-9     # verdict slack on the funnel bound

_ABORTS = (Infeasible, BarrierBreach, FunnelBreach, SingularGain, EvalError,
           ZeroDivisionError, OverflowError)


class CheckFailed(Exception):
    """The feasibility checks rejected the scenario and no override was
    given; the report lines ride along for display."""

    def __init__(self, lines):
        self.lines = list(lines)
        super().__init__("feasibility checks failed:\n" + "\n".join(self.lines))


def rk4_step(deriv, state, t: float, dt: float) -> list:
    """One classical RK4 step of d(state)/dt = deriv(state, t)."""
    k1 = deriv(state, t)
    s2 = [v + 0.5 * dt * d for v, d in zip(state, k1)]
    k2 = deriv(s2, t + 0.5 * dt)
    s3 = [v + 0.5 * dt * d for v, d in zip(state, k2)]
    k3 = deriv(s3, t + 0.5 * dt)
    s4 = [v + dt * d for v, d in zip(state, k3)]
    k4 = deriv(s4, t + dt)
    return [v + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
            for v, a, b, c, d in zip(state, k1, k2, k3, k4)]


@dataclass
class SimTrace:
    """Uniform-grid run log plus the verdict and summary monitors."""

    scenario: str
    controller: str
    columns: list
    rows: list
    verdict: str
    reason: str | None = None
    monitors: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        try:
            idx = self.columns.index(name)
        except ValueError:
            raise KeyError(f"trace has no column {name!r} "
                           f"(columns: {', '.join(self.columns)})") from None
        return [row[idx] for row in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, scenario: str = "", controller: str = ""):
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header:
                raise ValueError(f"{path}: empty trace file")
            columns = header.split(",")
            rows = []
            for line_no, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(columns):
                    raise ValueError(f"{path}:{line_no}: expected "
                                     f"{len(columns)} fields, got {len(parts)}")
                rows.append([float(v) for v in parts])
        return cls(scenario=scenario, controller=controller, columns=columns,
                   rows=rows, verdict="LOADED")


@dataclass
class _Controls:
    """Controller outputs applied over one step (or stage)."""

    nu_d: float
    nu: float
    u: float | None = None
    dzeta: float = 0.0
    dtheta: tuple = ()
    eps: tuple = ()
    xis: tuple = ()


class RuntimeModel:
    """A scenario compiled into callables, ready to integrate."""

    def __init__(self, spec: ScenarioSpec, controller: str | None = None,
                 dt: float | None = None, horizon: float | None = None,
                 hold_dt: float | None = None):
        self.spec = spec
        self.kind, block = spec.controller_block(controller)
        self.dt = float(dt) if dt is not None else spec.dt
        self.horizon = float(horizon) if horizon is not None else spec.horizon
        self.hold_dt = hold_dt if hold_dt is not None else spec.hold_dt
        if self.dt <= 0.0 or self.horizon <= 0.0:
            raise ScenarioError("dt and horizon must be positive")
        if self.hold_dt is not None and self.hold_dt < self.dt:
            raise ScenarioError("hold_dt must be at least dt")
        plant = spec.plant
        if plant.disturbances and self.kind in ("nominal", "nussbaum"):
            raise ScenarioError(
                f"controller '{self.kind}' cannot reject the declared "
                "additive disturbances")

        self.n = plant.n
        self.m = spec.m
        self.rho = spec.rho
        self.has_plant = self.kind != "nominal"

        zs = [f"z{i}" for i in range(1, self.n + 1)]
        self.f0_fn = compile_expr(plant.f0, ["x"])
        self.g0_fn = compile_expr(plant.g0, ["x"])
        self.f_fns = [compile_expr(f, ["x", *zs[:i + 1]])
                      for i, f in enumerate(plant.fs)]
        self.g_fns = [compile_expr(g, ["x", *zs[:i + 1]])
                      for i, g in enumerate(plant.gs)]
        self.d_fns = [compile_expr(d, ["t"]) for d in plant.disturbances]
        self.stacks = [build_barrier_stack(proxy, spec.rho)
                       for proxy in spec.proxies]
        self.nominal = build_nominal(spec.proxies[0], spec.nominal)
        self.xd_fn = compile_expr(spec.nominal.x_d, ["t"])

        self.dob = None
        self.dob_ctrl = None
        self.ppc_gains = None
        self.ppc_signs = None
        self.nuss_gains = None
        self.phi_fns = []
        if self.kind == "dob_backstepping":
            self.dob = block["observer"]
            self.dob_ctrl = build_dob_backstepping(
                list(plant.fs), list(plant.gs), spec.proxies[0], self.dob,
                block["gains"], spec.rho)
        elif self.kind == "ppc":
            self.ppc_signs = block["signs"]
            self.ppc_gains = initialize_funnels(
                block["gains"], self.ppc_signs, list(spec.initial_z),
                spec.initial_z[0], spec.rho)
        elif self.kind == "nussbaum":
            self.nuss_gains = block["gains"]
            self.phi_fns = [compile_expr(p, ["z1"]) for p in block["phi"]]
            self.nuss_init = (block["zeta0"], *block["theta0"])

        # state layout: x, then plant levels, then the virtual chain,
        # then controller-owned states
        self.i_z = 1 if self.has_plant else None
        self.i_mu = 1 + (self.n if self.has_plant else 0)
        self.i_extra = self.i_mu + self.m
        if self.kind == "nussbaum":
            self.extra_dim = 1 + len(self.phi_fns)
        elif self.kind == "dob_backstepping":
            self.extra_dim = self.n + self.n * (self.n - 1) // 2
        else:
            self.extra_dim = 0
        self.dim = self.i_extra + self.extra_dim
        self.qp_fallbacks = 0

    # -- state helpers ------------------------------------------------------

    def initial_state(self) -> list:
        spec = self.spec
        state = [spec.initial_x[0]]
        if self.has_plant:
            state.extend(spec.initial_z)
        state.append(spec.initial_z[0])       # first virtual state
        state.extend([0.0] * (self.m - 1))    # deeper chain starts at rest
        if self.kind == "nussbaum":
            state.extend(self.nuss_init)
        elif self.kind == "dob_backstepping":
            init = DobChainState.initial(self.dob, list(spec.initial_z))
            state.extend(init.s)
            for row in init.d_f:
                state.extend(row)
        return state

    def _split(self, state):
        x = state[0]
        z = state[self.i_z:self.i_z + self.n] if self.has_plant else []
        mu = state[self.i_mu:self.i_mu + self.m]
        return x, z, mu

    def _dob_state(self, state, z) -> DobChainState:
        base = self.i_extra
        s = state[base:base + self.n]
        d_f = []
        pos = base + self.n
        for i in range(1, self.n):
            width = self.n - i
            d_f.append(list(state[pos:pos + width]))
            pos += width
        dstate = DobChainState(s=list(s), d_hat=[0.0] * self.n, d_f=d_f)
        dstate.refresh_outputs(self.dob, list(z))
        return dstate

    # -- control evaluation -------------------------------------------------

    def safe_input(self, x: float, mu, t: float):
        """Nominal virtual input projected through every barrier filter."""
        nu_d = self.nominal.control([x], mu, t)
        nu = [nu_d]
        rows = []
        for stack in self.stacks:
            psi0, psi1 = stack.eval_constraint([x], mu, t)
            rows.append((psi0, psi1))
            nu = project_halfspace(nu, psi0, psi1)
        if len(rows) == 2:
            psi0, psi1 = rows[0]
            if psi0 + psi1[0] * nu[0] < -FEAS_TOL:
                nu = solve_cbf_qp_pair([nu_d], rows[0][0], rows[0][1],
                                       rows[1][0], rows[1][1])
                self.qp_fallbacks += 1
        return nu_d, nu[0], rows

    def controls(self, state, t: float) -> _Controls:
        x, z, mu = self._split(state)
        nu_d, nu, _ = self.safe_input(x, mu, t)
        if self.kind == "nominal":
            return _Controls(nu_d=nu_d, nu=nu)
        if self.kind == "ppc":
            u, xis, _ = ppc_control(self.ppc_gains, self.ppc_signs, z,
                                    mu[0], self.rho, t)
            return _Controls(nu_d=nu_d, nu=nu, u=u, xis=tuple(xis))
        if self.kind == "nussbaum":
            e = z[0] - mu[0]
            zeta = state[self.i_extra]
            theta = list(state[self.i_extra + 1:self.i_extra + self.extra_dim])
            nstate = NussbaumState(zeta=zeta, theta_hat=theta)
            phis = [fn(z[0]) for fn in self.phi_fns]
            u, dzeta, dtheta = nussbaum_control(
                self.nuss_gains, nstate, e, nu, self.rho.value(t), phis, t)
            return _Controls(nu_d=nu_d, nu=nu, u=u, dzeta=dzeta,
                             dtheta=tuple(dtheta))
        dstate = self._dob_state(state, z)
        u, eps = eval_dob_backstepping(self.dob_ctrl, [x], z, mu, nu,
                                       dstate, t)
        return _Controls(nu_d=nu_d, nu=nu, u=u, eps=tuple(eps))

    # -- dynamics -----------------------------------------------------------

    def deriv(self, state, t: float, c: _Controls | None = None) -> list:
        if c is None:
            c = self.controls(state, t)
        x, z, mu = self._split(state)
        out = [0.0] * self.dim
        if self.has_plant:
            out[0] = self.f0_fn(x) + self.g0_fn(x) * z[0]
            fv = [fn(x, *z[:i + 1]) for i, fn in enumerate(self.f_fns)]
            gv = [fn(x, *z[:i + 1]) for i, fn in enumerate(self.g_fns)]
            dv = [fn(t) for fn in self.d_fns] or [0.0] * self.n
            for i in range(self.n - 1):
                out[self.i_z + i] = fv[i] + gv[i] * z[i + 1] + dv[i]
            out[self.i_z + self.n - 1] = fv[-1] + gv[-1] * c.u + dv[-1]
        else:
            out[0] = self.f0_fn(x) + self.g0_fn(x) * mu[0]
        for i in range(self.m - 1):
            out[self.i_mu + i] = mu[i + 1]
        out[self.i_mu + self.m - 1] = c.nu
        if self.kind == "nussbaum":
            out[self.i_extra] = c.dzeta
            for j, d in enumerate(c.dtheta):
                out[self.i_extra + 1 + j] = d
        elif self.kind == "dob_backstepping":
            dstate = self._dob_state(state, z)
            sdot = dob_derivative(self.dob, dstate, fv, gv, list(z), c.u)
            fdot = filter_derivative(self.dob, dstate)
            pos = self.i_extra
            for v in sdot:
                out[pos] = v
                pos += 1
            for row in fdot:
                for v in row:
                    out[pos] = v
                    pos += 1
        return out

    def step(self, state, t: float, dt: float,
             held: _Controls | None = None, c1: _Controls | None = None):
        """One RK4 step; controls recomputed per stage unless held."""
        first = held if held is not None else c1

        def f(s, tt, cc):
            return self.deriv(s, tt, cc)

        k1 = f(state, t, first)
        s2 = [v + 0.5 * dt * d for v, d in zip(state, k1)]
        k2 = f(s2, t + 0.5 * dt, held)
        s3 = [v + 0.5 * dt * d for v, d in zip(state, k2)]
        k3 = f(s3, t + 0.5 * dt, held)
        s4 = [v + dt * d for v, d in zip(state, k3)]
        k4 = f(s4, t + dt, held)
        return [v + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                for v, a, b, c, d in zip(state, k1, k2, k3, k4)]

    # -- checks and logging -------------------------------------------------

    def run_checks(self):
        spec = self.spec
        box = spec.check_box if spec.check_box else None
        reports = []
        for stack in self.stacks:
            reports.append(check_conditions(
                stack, list(spec.initial_x), spec.initial_z[0], box=box,
                seed=spec.seed))
        return reports

    def trace_columns(self) -> list:
        cols = ["t", "x"]
        if self.has_plant:
            cols += [f"z{i}" for i in range(1, self.n + 1)]
        cols += [f"mu{i}" for i in range(1, self.m + 1)]
        cols += ["e", "rho", "x_d"]
        for k in range(1, len(self.stacks) + 1):
            cols += [f"h{k}"]
            cols += [f"b{k}_{i}" for i in range(self.m + 1)]
            cols += [f"psi0_{k}", f"psi1_{k}", f"margin{k}"]
        cols += ["nu_d", "nu"]
        if self.has_plant:
            cols.append("u")
            if self.d_fns:
                cols += [f"d{i}" for i in range(1, self.n + 1)]
        if self.kind == "dob_backstepping":
            cols += [f"dhat{i}" for i in range(1, self.n + 1)]
            cols += [f"df{i}_{j}" for i in range(1, self.n)
                     for j in range(1, self.n - i + 1)]
            cols += [f"eps{i}" for i in range(1, self.n + 1)]
        elif self.kind == "nussbaum":
            cols += ["zeta"] + [f"theta{j}"
                                for j in range(1, len(self.phi_fns) + 1)]
        elif self.kind == "ppc":
            cols += [f"xi{i}" for i in range(1, self.n + 1)]
        return cols

    def trace_row(self, state, t: float, c: _Controls) -> list:
        x, z, mu = self._split(state)
        e = (z[0] - mu[0]) if self.has_plant else 0.0
        row = [t, x, *z, *mu, e, self.rho.value(t), self.xd_fn(t)]
        for stack in self.stacks:
            h = stack.h_value([x])
            bs = stack.eval_barriers([x], mu, t)
            psi0, psi1 = stack.eval_constraint([x], mu, t)
            row += [h, *bs, psi0, psi1[0], psi0 + psi1[0] * c.nu]
        row += [c.nu_d, c.nu]
        if self.has_plant:
            row.append(c.u)
            if self.d_fns:
                row += [fn(t) for fn in self.d_fns]
        if self.kind == "dob_backstepping":
            dstate = self._dob_state(state, z)
            row += dstate.d_hat
            for frow in dstate.d_f:
                row += frow
            row += list(c.eps)
        elif self.kind == "nussbaum":
            row += state[self.i_extra:self.i_extra + self.extra_dim]
        elif self.kind == "ppc":
            row += list(c.xis)
        return row


def simulate(spec: ScenarioSpec, controller: str | None = None,
             dt: float | None = None, horizon: float | None = None,
             hold_dt: float | None = None, force: bool = False,
             check: bool = True) -> SimTrace:
    """Run one scenario to its horizon (or to breakdown).

    The feasibility checks run first and a failing report stops the run
    unless force is set, in which case the override is recorded in the
    trace monitors.
    """
    model = RuntimeModel(spec, controller=controller, dt=dt, horizon=horizon,
                         hold_dt=hold_dt)
    monitors: dict = {}
    if check:
        try:
            reports = model.run_checks()
        except ValueError as exc:
            raise CheckFailed([str(exc)]) from None
        bad = [line for rep in reports if not rep.ok for line in rep.lines()]
        if bad and not force:
            raise CheckFailed(bad)
        if bad:
            monitors["check_forced"] = 1.0

    columns = model.trace_columns()
    rows: list = []
    verdict_floor = {"min_h": math.inf, "max_e_excess": -math.inf,
                     "min_margin": math.inf, "min_b": math.inf}
    i_e = columns.index("e")
    i_rho = columns.index("rho")
    h_idx = [columns.index(f"h{k}") for k in range(1, len(model.stacks) + 1)]
    m_idx = [columns.index(f"margin{k}")
             for k in range(1, len(model.stacks) + 1)]
    b_idx = [columns.index(f"b{k}_{i}")
             for k in range(1, len(model.stacks) + 1)
             for i in range(model.m + 1)]

    def log(state, t, c):
        row = model.trace_row(state, t, c)
        rows.append(row)
        verdict_floor["min_h"] = min(verdict_floor["min_h"],
                                     *(row[i] for i in h_idx))
        verdict_floor["max_e_excess"] = max(verdict_floor["max_e_excess"],
                                            abs(row[i_e]) - row[i_rho])
        verdict_floor["min_margin"] = min(verdict_floor["min_margin"],
                                          *(row[i] for i in m_idx))
        verdict_floor["min_b"] = min(verdict_floor["min_b"],
                                     *(row[i] for i in b_idx))

    model.qp_fallbacks = 0
    state = model.initial_state()
    n_steps = max(1, int(round(model.horizon / model.dt)))
    reason = None
    aborted = False
    held = None
    next_hold = 0.0
    try:
        c = model.controls(state, 0.0)
        log(state, 0.0, c)
        for k in range(1, n_steps + 1):
            t_prev = (k - 1) * model.dt
            if model.hold_dt is not None and t_prev >= next_hold - 1e-12:
                held = c
                next_hold += model.hold_dt
            state = model.step(state, t_prev, model.dt, held=held, c1=c)
            t = k * model.dt
            if not all(math.isfinite(v) for v in state):
                reason = f"non-finite state at t={t:.6g}"
                aborted = True
                break
            c = held if held is not None else model.controls(state, t)
            if held is not None:
                # recompute diagnostics at the grid point, keep held inputs
                fresh = model.controls(state, t)
                c = _Controls(nu_d=held.nu_d, nu=held.nu, u=held.u,
                              dzeta=held.dzeta, dtheta=held.dtheta,
                              eps=fresh.eps, xis=fresh.xis)
            log(state, t, c)
    except _ABORTS as exc:
        reason = f"{type(exc).__name__}: {exc}"
        aborted = True

    monitors.update(
        min_h=verdict_floor["min_h"],
        max_e_excess=verdict_floor["max_e_excess"],
        min_qp_margin=verdict_floor["min_margin"],
        min_b=verdict_floor["min_b"],
        qp_fallbacks=float(model.qp_fallbacks),
        steps=float(len(rows) - 1),
    )
    if aborted:
        verdict = "ABORTED"
    elif monitors["min_h"] >= -H_TOL and monitors["max_e_excess"] <= E_TOL:
        verdict = "SAFE"
    else:
        verdict = "UNSAFE"
    return SimTrace(scenario=spec.name, controller=model.kind,
                    columns=columns, rows=rows, verdict=verdict,
                    reason=reason, monitors=monitors)
