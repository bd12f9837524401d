"""Model-free learning of the mean-variance policy from sampled episodes.

The learner never sees the return distribution.  It fits a parametric value
surface and Gaussian policy by stochastic gradient steps on a squared
Bellman-residual cost, and tunes the Lagrange target w from realized
terminal wealths.  The riskless factor r_f is treated as known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dtmv.analytic import GaussianPolicy, ProblemSpec
from dtmv.market import RNG_ALGORITHM, ReturnModel, sample_path, step_wealth

ALGORITHM_DISCRETE = "emv-discrete"

# training aborts rather than emit garbage past these
DIVERGENCE_COST = 1e12
PHI2_MARGIN = 1e-8


class InfeasiblePolicyError(ValueError):
    """Policy parameters outside the region where the policy mean is real."""


class TrainingDivergedError(RuntimeError):
    """The residual cost or a parameter left the finite range during training."""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueParams:
    """Coefficients of the value surface
    theta1^(T-t) * (x - rho_t * w)^2 + theta2 * t^2 + theta3 * t + theta4."""

    theta1: float
    theta2: float
    theta3: float
    theta4: float


@dataclass(frozen=True)
class PolicyParams:
    """Exploitation scale phi1 and time-decay rate phi2 of the learned policy."""

    phi1: float
    phi2: float


@dataclass
class LagrangeState:
    """Self-correcting multiplier: w tracks the wealth target b through the
    running record of terminal wealths."""

    w: float
    alpha: float
    terminal_wealths: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class HyperParams:
    """Training configuration.  episodes is the total episode budget M and
    refresh_every the period N of the w update."""

    spec: ProblemSpec
    eta_theta: float = 0.0005
    eta_phi: float = 0.0005
    alpha: float = 0.05
    episodes: int = 15000
    refresh_every: int = 10
    prefix_updates: bool = True

    def __post_init__(self) -> None:
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if self.eta_theta <= 0.0 or self.eta_phi <= 0.0 or self.alpha <= 0.0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class Episode:
    """One sampled trajectory: wealth x_0..x_T, controls u_0..u_{T-1}, and
    the realized excess returns r_0..r_{T-1}."""

    wealth: Tuple[float, ...]
    controls: Tuple[float, ...]
    returns: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.wealth) != len(self.controls) + 1 or len(self.controls) != len(self.returns):
            raise ValueError("episode arrays inconsistent")

    @property
    def terminal_wealth(self) -> float:
        return self.wealth[-1]

    @property
    def states(self) -> Tuple[Tuple[int, float], ...]:
        return tuple(enumerate(self.wealth))


@dataclass(frozen=True)
class EpisodeRecord:
    """Per-episode training log row."""

    episode: int
    terminal_wealth: float
    theta1: float
    theta2: float
    theta3: float
    theta4: float
    phi1: float
    phi2: float
    w: float


@dataclass(frozen=True)
class TrainResult:
    theta: ValueParams
    phi: PolicyParams
    w: float
    history: Tuple[EpisodeRecord, ...]
    algorithm: str = ALGORITHM_DISCRETE


# ---------------------------------------------------------------------------
# parametric policy and value surface
# ---------------------------------------------------------------------------


def _discount(t: int, T: int, r_f: float) -> float:
    return r_f ** -(T - t)


def policy_from_params(
    phi: PolicyParams, spec: ProblemSpec, r_f: float, t: int, x: float, w: float
) -> GaussianPolicy:
    """Gaussian control density implied by phi at state (t, x).

    Requires exp(-2*phi2) <= r_f^2, otherwise the mean coefficient would be
    imaginary (InfeasiblePolicyError).
    """
    if not 0 <= t < spec.T:
        raise ValueError(f"t={t} outside 0..{spec.T - 1}")
    gap = r_f * r_f - math.exp(-2.0 * phi.phi2)
    if gap < 0.0:
        raise InfeasiblePolicyError(f"phi2={phi.phi2} below the feasibility floor -ln(r_f)")
    dev = x - _discount(t, spec.T, r_f) * w
    mean = -math.sqrt(gap / (spec.lam * math.pi)) * math.exp((2.0 * phi.phi1 - 1.0) / 2.0) * dev
    variance = math.exp(2.0 * phi.phi2 * (spec.T - t - 1) + 2.0 * phi.phi1 - 1.0) / (2.0 * math.pi)
    return GaussianPolicy(mean, variance)


def policy_entropy(phi: PolicyParams, spec: ProblemSpec, t: int) -> float:
    """Differential entropy of the learned policy; linear in phi by design."""
    if not 0 <= t < spec.T:
        raise ValueError(f"t={t} outside 0..{spec.T - 1}")
    return phi.phi1 + phi.phi2 * (spec.T - t - 1)


def value_from_params(
    theta: ValueParams, spec: ProblemSpec, r_f: float, t: int, x: float, w: float
) -> float:
    if not 0 <= t <= spec.T:
        raise ValueError(f"t={t} outside 0..{spec.T}")
    dev = x - _discount(t, spec.T, r_f) * w
    return (
        theta.theta1 ** (spec.T - t) * dev * dev
        + theta.theta2 * t * t
        + theta.theta3 * t
        + theta.theta4
    )


def default_params(spec: ProblemSpec, r_f: float) -> Tuple[ValueParams, PolicyParams]:
    """Standard cold start: flat value drift terms, mild exploration decay."""
    phi = PolicyParams(phi1=1.0, phi2=0.01)
    if phi.phi2 <= -math.log(r_f):
        raise InfeasiblePolicyError("default phi2 infeasible for this r_f")
    theta1 = math.exp(-2.0 * phi.phi2)
    # w starts at b, so the terminal constant starts at zero
    return ValueParams(theta1, 0.0, 0.0, 0.0), phi


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------


def sample_episode(
    phi: PolicyParams,
    w: float,
    model: ReturnModel,
    spec: ProblemSpec,
    r_f: float,
    rng: np.random.Generator,
) -> Episode:
    """Roll out one trajectory from x0 under the current stochastic policy."""
    returns = sample_path(model, spec.T, rng)
    wealth = [spec.x0]
    controls = []
    x = spec.x0
    for t in range(spec.T):
        pol = policy_from_params(phi, spec, r_f, t, x, w)
        u = pol.mean + math.sqrt(pol.variance) * rng.standard_normal()
        x = step_wealth(x, u, float(returns[t]), r_f)
        controls.append(u)
        wealth.append(x)
    return Episode(tuple(wealth), tuple(controls), tuple(returns))


# ---------------------------------------------------------------------------
# residual cost and gradients
# ---------------------------------------------------------------------------


def _check_samples(samples: Sequence[Tuple[int, float]], T: int) -> None:
    for (t0, _), (t1, _) in zip(samples, samples[1:]):
        if t1 != t0 + 1:
            raise ValueError("samples must carry consecutive periods")
    if samples and not (0 <= samples[0][0] and samples[-1][0] <= T):
        raise ValueError("sample periods outside 0..T")


def _residual_terms(
    samples: Sequence[Tuple[int, float]],
    theta: ValueParams,
    phi: PolicyParams,
    w: float,
    spec: ProblemSpec,
    r_f: float,
) -> List[Tuple[float, float, float, int]]:
    """Per-transition (residual, d_residual/d_phi2 bracket, sum weight) terms.

    Returns tuples (res, dres_dphi2, two_t_plus_one, t).  theta1 is always
    taken as exp(-2*phi2): the value surface and the policy share phi2.
    """
    _check_samples(samples, spec.T)
    T, lam = spec.T, spec.lam
    e2 = math.exp(-2.0 * phi.phi2)
    out = []
    for (t0, x0), (t1, x1) in zip(samples, samples[1:]):
        dev0 = x0 - _discount(t0, T, r_f) * w
        dev1 = x1 - _discount(t1, T, r_f) * w
        q0 = e2 ** (T - t0) * dev0 * dev0
        q1 = e2 ** (T - t1) * dev1 * dev1
        res = (
            q1
            - q0
            + theta.theta2 * (2.0 * t0 + 1.0)
            + theta.theta3
            - lam * (phi.phi1 + phi.phi2 * (T - t0 - 1))
        )
        dres_dphi2 = 2.0 * (T - t0) * q0 - 2.0 * (T - t1) * q1 - lam * (T - t0 - 1)
        out.append((res, dres_dphi2, 2.0 * t0 + 1.0, t0))
    return out


def cost(
    samples: Sequence[Tuple[int, float]],
    theta: ValueParams,
    phi: PolicyParams,
    w: float,
    spec: ProblemSpec,
    r_f: float,
) -> float:
    """Half the summed squared Bellman residual over the sampled transitions.

    An empty or single-state sample list has no transitions and costs 0.
    """
    terms = _residual_terms(samples, theta, phi, w, spec, r_f)
    return 0.5 * sum(res * res for res, _, _, _ in terms)


def grad_theta(
    samples: Sequence[Tuple[int, float]],
    theta: ValueParams,
    phi: PolicyParams,
    w: float,
    spec: ProblemSpec,
    r_f: float,
) -> Tuple[float, float]:
    """Cost gradient in (theta2, theta3)."""
    terms = _residual_terms(samples, theta, phi, w, spec, r_f)
    g2 = sum(res * wt for res, _, wt, _ in terms)
    g3 = sum(res for res, _, _, _ in terms)
    return g2, g3


def grad_phi(
    samples: Sequence[Tuple[int, float]],
    theta: ValueParams,
    phi: PolicyParams,
    w: float,
    spec: ProblemSpec,
    r_f: float,
) -> Tuple[float, float]:
    """Cost gradient in (phi1, phi2)."""
    terms = _residual_terms(samples, theta, phi, w, spec, r_f)
    g1 = -spec.lam * sum(res for res, _, _, _ in terms)
    g2 = sum(res * dres for res, dres, _, _ in terms)
    return g1, g2


def apply_updates(
    theta: ValueParams,
    phi: PolicyParams,
    grads: Tuple[float, float, float, float],
    eta_theta: float,
    eta_phi: float,
    w: float,
    spec: ProblemSpec,
    r_f: float,
) -> Tuple[ValueParams, PolicyParams]:
    """One gradient step on (theta2, theta3, phi1, phi2), then the two
    constrained coefficients.

    theta1 is pinned to exp(-2*phi2) and theta4 to the terminal condition
    value_from_params(T, x) = (x - w)^2 - (w - b)^2.  phi2 is projected onto
    the feasible region phi2 > -ln(r_f).
    """
    g_t2, g_t3, g_p1, g_p2 = grads
    theta2 = theta.theta2 - eta_theta * g_t2
    theta3 = theta.theta3 - eta_theta * g_t3
    phi1 = phi.phi1 - eta_phi * g_p1
    phi2 = phi.phi2 - eta_phi * g_p2
    floor = -math.log(r_f) + PHI2_MARGIN
    if phi2 < floor:
        phi2 = floor
    theta1 = math.exp(-2.0 * phi2)
    theta4 = -theta2 * spec.T**2 - theta3 * spec.T - (w - spec.b) ** 2
    return ValueParams(theta1, theta2, theta3, theta4), PolicyParams(phi1, phi2)


def update_w(state: LagrangeState, b: float, n: int) -> LagrangeState:
    """Move w against the mean of the last n terminal wealths:
    w <- w - alpha * (mean - b).  Requires at least n recorded wealths."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(state.terminal_wealths) < n:
        raise ValueError(
            f"w update needs {n} terminal wealths, have {len(state.terminal_wealths)}"
        )
    recent = state.terminal_wealths[-n:]
    state.w = state.w - state.alpha * (sum(recent) / n - b)
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    hyper: HyperParams,
    model: ReturnModel,
    r_f: float,
    rng: np.random.Generator,
    init: Optional[Tuple[ValueParams, PolicyParams]] = None,
) -> TrainResult:
    """Run the episodic learner for hyper.episodes episodes.

    Per episode: sample a trajectory under the current policy, then sweep the
    growing prefixes of its state sequence, taking one (theta, phi) update
    per prefix (or a single full-episode update when prefix_updates is off).
    Every refresh_every episodes the Lagrange target w is corrected from the
    recent terminal wealths.

    Raises TrainingDivergedError when the residual cost exceeds
    DIVERGENCE_COST or any parameter stops being finite.
    """
    spec = hyper.spec
    theta, phi = init if init is not None else default_params(spec, r_f)
    lag = LagrangeState(w=spec.b, alpha=hyper.alpha)
    history: List[EpisodeRecord] = []

    for ep in range(1, hyper.episodes + 1):
        episode = sample_episode(phi, lag.w, model, spec, r_f, rng)
        states = episode.states
        if hyper.prefix_updates:
            prefixes = [states[: i + 1] for i in range(1, spec.T + 1)]
        else:
            prefixes = [states]
        for sample in prefixes:
            g_t2, g_t3 = grad_theta(sample, theta, phi, lag.w, spec, r_f)
            g_p1, g_p2 = grad_phi(sample, theta, phi, lag.w, spec, r_f)
            theta, phi = apply_updates(
                theta, phi, (g_t2, g_t3, g_p1, g_p2),
                hyper.eta_theta, hyper.eta_phi, lag.w, spec, r_f,
            )

        lag.terminal_wealths.append(episode.terminal_wealth)
        if ep % hyper.refresh_every == 0:
            update_w(lag, spec.b, hyper.refresh_every)

        final_cost = cost(states, theta, phi, lag.w, spec, r_f)
        params_ok = all(
            math.isfinite(v)
            for v in (theta.theta1, theta.theta2, theta.theta3, theta.theta4,
                      phi.phi1, phi.phi2, lag.w)
        )
        if not params_ok or not math.isfinite(final_cost) or abs(final_cost) > DIVERGENCE_COST:
            raise TrainingDivergedError(
                f"training diverged at episode {ep} (cost {final_cost!r})"
            )
        history.append(
            EpisodeRecord(
                episode=ep,
                terminal_wealth=episode.terminal_wealth,
                theta1=theta.theta1,
                theta2=theta.theta2,
                theta3=theta.theta3,
                theta4=theta.theta4,
                phi1=phi.phi1,
                phi2=phi.phi2,
                w=lag.w,
            )
        )

    return TrainResult(theta=theta, phi=phi, w=lag.w, history=tuple(history))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str, algorithm: str, params: Dict[str, float], rng: np.random.Generator
) -> None:
    """Write a flat key=value checkpoint including the full RNG state."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError("only pcg64 generators are checkpointable")
    lines = [f"algorithm={algorithm}", f"rng.algorithm={RNG_ALGORITHM}"]
    lines.append(f"rng.state={state['state']['state']}")
    lines.append(f"rng.inc={state['state']['inc']}")
    lines.append(f"rng.has_uint32={state['has_uint32']}")
    lines.append(f"rng.uinteger={state['uinteger']}")
    for key in sorted(params):
        lines.append(f"param.{key}={params[key]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> Tuple[str, Dict[str, float], np.random.Generator]:
    """Inverse of save_checkpoint; the restored generator continues the
    saved stream exactly."""
    raw: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            raw[key] = val
    if raw.get("rng.algorithm") != RNG_ALGORITHM:
        raise ValueError(f"{path}: unsupported rng algorithm {raw.get('rng.algorithm')!r}")
    params = {
        key[len("param.") :]: float(val) for key, val in raw.items() if key.startswith("param.")
    }
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(raw["rng.state"]), "inc": int(raw["rng.inc"])},
        "has_uint32": int(raw["rng.has_uint32"]),
        "uinteger": int(raw["rng.uinteger"]),
    }
    return raw["algorithm"], params, np.random.Generator(bitgen)
