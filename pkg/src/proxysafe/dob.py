"""Disturbance observer and low-pass filter chain for scalar plant levels.

The observer per level keeps an internal state s_i and outputs the
estimate d_hat_i = s_i + alpha_i z_i; the internal state integrates

    ds_i/dt = -alpha_i (f_i + g_i z_{i+1} + d_hat_i)        i < n
    ds_n/dt = -alpha_n (f_n + g_n u + d_hat_n)

which makes the estimation error a first-order tracker of the true
disturbance.  Because the estimate's own derivative depends on the
unknown error, levels that need differentiable estimates (every level
except the last) feed a cascade of first-order low-pass filters

    d(df_{i,j})/dt = -T_{i,j} (df_{i,j} - df_{i,j-1}),  df_{i,0} = d_hat_i

whose stage derivatives are exactly known; level i carries n-i stages so
the deepest stage is (n-i)-times differentiable.

The module computes right-hand sides only; integration belongs to the
simulator, which re-derives every d_hat_i from (s_i, z_i) after each
step so the output map holds exactly rather than drifting.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["DobSpec", "DobChainState", "dob_derivative", "filter_derivative"]


@dataclass(frozen=True)
class DobSpec:
    """Observer gains, analysis constants, and filter time constants.

    alphas holds one positive gain per plant level.  nus are the analysis
    constants entering kappa_i = alpha_i - nu_i/2; they must sit in
    (0, 2 alpha_i) so every kappa_i stays positive.  time_constants[i-1]
    holds (T_{i,1}, .., T_{i,n-i}) for level i < n; the last level has no
    filter because its estimate is used directly.
    """

    alphas: tuple
    nus: tuple = ()
    time_constants: tuple = ()

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(a <= 0.0 for a in alphas):
            raise ValueError("need at least one positive observer gain")
        nus = tuple(float(v) for v in self.nus) or tuple(1.0 for _ in alphas)
        if len(nus) != len(alphas):
            raise ValueError("need one nu per level")
        for a, v in zip(alphas, nus):
            if not 0.0 < v < 2.0 * a:
                raise ValueError(f"nu={v} outside (0, {2 * a})")
        n = len(alphas)
        tcs = tuple(tuple(float(t) for t in row) for row in self.time_constants)
        if not tcs:
            tcs = tuple(tuple(1.0 for _ in range(n - i)) for i in range(1, n))
        if len(tcs) != n - 1 or any(len(row) != n - i for i, row
                                    in enumerate(tcs, start=1)):
            raise ValueError("need filter constants T_{i,1}..T_{i,n-i} "
                             "for every level i < n")
        if any(t <= 0.0 for row in tcs for t in row):
            raise ValueError("filter time constants must be positive")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "nus", nus)
        object.__setattr__(self, "time_constants", tcs)

    @property
    def n(self) -> int:
        return len(self.alphas)

    def kappa(self, i: int) -> float:
        """alpha_i - nu_i/2 for level i (1-based)."""
        return self.alphas[i - 1] - self.nus[i - 1] / 2.0


@dataclass
class DobChainState:
    """Mutable observer state: internal s per level, outputs, filter stages.

    d_hat is derived data (s_i + alpha_i z_i), never integrated; call
    refresh_outputs after any change to s or z.  d_f[i-1][j-1] holds the
    j-th filter stage of level i.
    """

    s: list
    d_hat: list
    d_f: list

    @classmethod
    def initial(cls, spec: DobSpec, z0) -> "DobChainState":
        z0 = [float(v) for v in z0]
        if len(z0) != spec.n:
            raise ValueError(f"expected {spec.n} initial plant levels")
        s = [-a * z for a, z in zip(spec.alphas, z0)]
        state = cls(s=s, d_hat=[0.0] * spec.n,
                    d_f=[[0.0] * len(row) for row in spec.time_constants])
        state.refresh_outputs(spec, z0)
        return state

    def refresh_outputs(self, spec: DobSpec, z) -> None:
        for i, (si, a) in enumerate(zip(self.s, spec.alphas)):
            self.d_hat[i] = si + a * float(z[i])


def dob_derivative(spec: DobSpec, state: DobChainState, f_vals, g_vals,
                   z, u: float) -> list:
    """ds_i/dt for every level, given current plant values.

    f_vals and g_vals are the plant drift and gain evaluated at the
    current state; z the level values z_1..z_n; u the control.  The
    caller must have refreshed d_hat first.
    """
    n = spec.n
    out = []
    for i in range(n):
        inner = f_vals[i] + state.d_hat[i]
        inner += g_vals[i] * (u if i == n - 1 else float(z[i + 1]))
        out.append(-spec.alphas[i] * inner)
    return out


def filter_derivative(spec: DobSpec, state: DobChainState) -> list:
    """d(df_{i,j})/dt for every filter stage, same shape as state.d_f."""
    out = []
    for i, row in enumerate(state.d_f):
        upstream = state.d_hat[i]
        drow = []
        for j, stage in enumerate(row):
            drow.append(-spec.time_constants[i][j] * (stage - upstream))
            upstream = stage
        out.append(drow)
    return out
