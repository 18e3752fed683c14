"""Simulation, metrics, exit-selection analyses, and parameter sweeps.

Controllers are thin adapters around solved policies, oracle solutions, or
trained networks, exposing either a per-epoch mode choice (one-shot) or a
per-slot pause/proceed choice (incremental). The simulator pre-draws all
environment randomness per episode so different controllers evaluated
under the same seed face identical arrival and environment-state paths.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import dqn as dqn_mod
from . import mdp as mdp_mod
from . import oracle as oracle_mod
from .confidence import exit_accuracy
from .env import InfeasibleAction, energy_rate, stationary_distribution, two_state_env


class IncompatibleController(ValueError):
    """Controller does not fit the environment or dataset shape."""


class MmsController:
    """One-shot mode choice from a solved (b, h) policy table."""

    kind = "MmS"
    incremental = False

    def __init__(self, policy, env):
        if len(policy.actions) != env.n_states:
            raise IncompatibleController("policy table size does not match environment")
        self.actions = np.asarray(policy.actions)
        self.env = env
        self.n_modes = env.n_modes

    def decide(self, b, h, z, u_dec):
        return int(self.actions[self.env.state_index(b, h)])


class OracleController:
    """One-shot confidence-aware choice from a converged oracle solution."""

    kind = "OsIAwOracle"
    incremental = False

    def __init__(self, solution, env):
        if solution.env.fingerprint() != env.fingerprint():
            raise IncompatibleController("oracle solution solved for a different environment")
        self.env = env
        self.n_modes = env.n_modes
        self.continuation = solution.continuation
        costs = np.asarray(env.battery.cost)
        bs = np.arange(env.battery.b_max + 1)
        self._mask = np.where(costs[None, :] <= bs[:, None], 0.0, -np.inf)

    def decide(self, b, h, z, u_dec):
        scores = z + self.continuation[:, self.env.state_index(b, h)] + self._mask[b]
        return int(np.argmax(scores))


class IncTableController:
    """Per-slot pause/proceed from a solved (b, h, xi, tau) policy table."""

    kind = "IncIAgEE"
    incremental = True

    def __init__(self, policy, env):
        expected = env.n_states * env.n_modes * env.epoch.T
        if len(policy.actions) != expected:
            raise IncompatibleController("incremental policy table size mismatch")
        self.actions = np.asarray(policy.actions)
        self.env = env
        self.n_modes = env.n_modes

    def decide_sub(self, b, h, xi, tau, z_xi, u_dec):
        return int(self.actions[mdp_mod.inc_state_index(self.env, b, h, xi, tau)])


class IncDqnController:
    """Per-slot pause/proceed from a trained incremental Q-network."""

    kind = "IncIAwDQN"
    incremental = True

    def __init__(self, net, env):
        if net.sizes[0] != dqn_mod.inc_input_dim(env) or net.sizes[-1] != 2:
            raise IncompatibleController("network shape does not match incremental encoding")
        self.net = net
        self.env = env
        self.n_modes = env.n_modes

    def decide_sub(self, b, h, xi, tau, z_xi, u_dec):
        x = dqn_mod.encode_inc(self.env, b, h, xi, tau, z_xi)
        feas = dqn_mod._inc_feasible(self.env, b, xi)
        return dqn_mod.greedy_action(self.net, x, feas)


class OsDqnController:
    """One-shot mode choice from a trained full-confidence Q-network."""

    kind = "OsIAwDQN"
    incremental = False

    def __init__(self, net, env):
        if net.sizes[0] != dqn_mod.os_input_dim(env) or net.sizes[-1] != env.n_modes:
            raise IncompatibleController("network shape does not match one-shot encoding")
        self.net = net
        self.env = env
        self.n_modes = env.n_modes

    def decide(self, b, h, z, u_dec):
        x = dqn_mod.encode_os(self.env, b, h, z)
        feas = dqn_mod._os_feasible(self.env, b)
        return dqn_mod.greedy_action(self.net, x, feas)


class RandomFeasibleController:
    """Uniform choice among the modes affordable at the current battery."""

    kind = "RandomFeasible"
    incremental = False

    def __init__(self, env):
        self.env = env
        self.n_modes = env.n_modes
        self._costs = np.asarray(env.battery.cost)

    def decide(self, b, h, z, u_dec):
        n_feas = int(np.searchsorted(self._costs, b, side="right"))
        return int(u_dec * n_feas)


class FixedModeController:
    """Always the requested mode, degrading to the best affordable one."""

    incremental = False

    def __init__(self, k, env):
        if not 0 <= k < env.n_modes:
            raise IncompatibleController(f"mode {k} out of range")
        self.k = k
        self.kind = f"FixedMode({k})"
        self.env = env
        self.n_modes = env.n_modes
        self._costs = np.asarray(env.battery.cost)

    def decide(self, b, h, z, u_dec):
        affordable = int(np.searchsorted(self._costs, b, side="right")) - 1
        return min(self.k, affordable)


@dataclass(frozen=True)
class EpisodeResult:
    accuracy: float
    exit_hist: np.ndarray
    energy_used: int
    overflow: int
    outage: int
    epochs: int


def _run_episode(controller, env, dataset, epochs, rng, cum_pi):
    t_slots = env.epoch.T
    n_h = env.chain.n
    costs = env.battery.cost
    b_max = env.battery.b_max
    cond_next = env.condition_on_next
    cum_chain = np.cumsum(env.chain.transition, axis=1)
    cum_arr = np.cumsum(env.arrivals.pmf_per_state, axis=1)
    z_all = dataset.z
    correct_all = dataset.correct
    k_modes = env.n_modes

    rec_idx = rng.integers(len(dataset), size=epochs)
    u_h = rng.random((epochs, t_slots))
    u_e = rng.random((epochs, t_slots))
    u_dec = rng.random(epochs)
    b = b_max
    h = int(np.searchsorted(cum_pi, rng.random()))

    hits = 0
    hist = np.zeros(k_modes, dtype=np.int64)
    energy = 0
    overflow = 0
    outage = 0
    one_shot = not controller.incremental
    min_cost = costs[1] if k_modes > 1 else None

    for n in range(epochs):
        rec = rec_idx[n]
        z_rec = z_all[rec]
        if min_cost is not None and b < min_cost:
            outage += 1
        if one_shot:
            a = controller.decide(b, h, z_rec, u_dec[n])
            if costs[a] > b:
                raise InfeasibleAction(f"{controller.kind} chose mode {a} at b={b}")
            mode = a
            energy += costs[a]
            for tau in range(t_slots):
                c = costs[a] if tau == 0 else 0
                h2 = int(np.searchsorted(cum_chain[h], u_h[n, tau]))
                src = h2 if cond_next else h
                e = int(np.searchsorted(cum_arr[src], u_e[n, tau]))
                nb = b - c + e
                if nb > b_max:
                    overflow += nb - b_max
                    nb = b_max
                b = nb if nb > 0 else 0
                h = h2
        else:
            xi = 0
            for tau in range(t_slots):
                alpha = controller.decide_sub(b, h, xi, tau, z_rec[xi], u_dec[n])
                if alpha:
                    c = costs[xi + 1] - costs[xi]
                    if xi >= k_modes - 1 or c > b:
                        raise InfeasibleAction(f"{controller.kind} proceed at b={b}, xi={xi}")
                else:
                    c = 0
                energy += c
                h2 = int(np.searchsorted(cum_chain[h], u_h[n, tau]))
                src = h2 if cond_next else h
                e = int(np.searchsorted(cum_arr[src], u_e[n, tau]))
                nb = b - c + e
                if nb > b_max:
                    overflow += nb - b_max
                    nb = b_max
                b = nb if nb > 0 else 0
                h = h2
                xi += alpha
            mode = xi
        hist[mode] += 1
        hits += int(correct_all[rec, mode])
    return EpisodeResult(
        accuracy=hits / epochs,
        exit_hist=hist,
        energy_used=energy,
        overflow=overflow,
        outage=outage,
        epochs=epochs,
    )


def simulate(controller, env, dataset, episodes, epochs, seed):
    """Run independent episodes; returns one EpisodeResult per episode.

    Per-episode generators come from spawning the master seed, so episode
    e sees the same environment randomness no matter which controller is
    being evaluated.
    """
    if dataset.n_exits != env.n_modes:
        raise IncompatibleController(
            f"dataset has {dataset.n_exits} exits, environment {env.n_modes} modes"
        )
    if controller.n_modes != env.n_modes:
        raise IncompatibleController("controller mode count mismatch")
    cum_pi = np.cumsum(stationary_distribution(env.chain))
    children = np.random.SeedSequence(seed).spawn(episodes)
    return [
        _run_episode(controller, env, dataset, epochs, np.random.default_rng(child), cum_pi)
        for child in children
    ]


def aggregate_accuracy(results):
    """Mean accuracy and normal-approximation 95% interval over episodes."""
    accs = np.array([r.accuracy for r in results])
    mean = float(accs.mean())
    if len(accs) > 1:
        half = 1.96 * accs.std(ddof=1) / np.sqrt(len(accs))
    else:
        half = 0.0
    return mean, mean - half, mean + half


def exit_probability_matrix(policy, env):
    """Exact per-epoch exit distribution of an incremental policy.

    Follows the closed-loop slot chain over (b, h, xi) for one epoch,
    absorbing into a fictitious terminal state per final mode at the last
    slot. Returns eta with shape (n_bh_states, K); rows sum to 1.
    """
    actions = np.asarray(policy.actions)
    k = env.n_modes
    t = env.epoch.T
    n_bh = env.n_states
    expected = n_bh * k * t
    if len(actions) != expected:
        raise IncompatibleController("incremental policy table size mismatch")
    n = n_bh * k

    def step_matrix(tau, final):
        mat = np.zeros((n, k) if final else (n, n))
        for xi in range(k):
            rows = np.arange(n_bh) * k + xi
            idx = np.array(
                [mdp_mod.inc_state_index(env, s // env.chain.n, s % env.chain.n, xi, tau)
                 for s in range(n_bh)]
            )
            alphas = actions[idx]
            for alpha in (0, 1):
                sel = np.flatnonzero(alphas == alpha)
                if len(sel) == 0:
                    continue
                if final:
                    mat[rows[sel], xi + alpha] = 1.0
                else:
                    cost = env.battery.cost[xi + alpha] - env.battery.cost[xi]
                    slot = env.slot_kernel(cost)
                    cols = np.arange(n_bh) * k + (xi + alpha)
                    mat[np.ix_(rows[sel], cols)] = slot[sel]
        return mat

    dist = np.zeros((n_bh, n))
    dist[np.arange(n_bh), np.arange(n_bh) * k] = 1.0     # start at xi = 0
    for tau in range(t - 1):
        dist = dist @ step_matrix(tau, final=False)
    return dist @ step_matrix(t - 1, final=True)


def exit_probability_oracle(solution, dataset):
    """Fraction of records each (b, h) routes to every mode."""
    env = solution.env
    costs = np.asarray(env.battery.cost)
    b_of = np.repeat(np.arange(env.battery.b_max + 1), env.chain.n)
    mask = np.where(costs[None, :] <= b_of[:, None], 0.0, -np.inf)    # (S, A)
    scores = dataset.z[:, None, :] + solution.continuation.T[None, :, :] + mask[None, :, :]
    choice = scores.argmax(axis=2)                                    # (D, S)
    eta = np.zeros((env.n_states, env.n_modes))
    for s in range(env.n_states):
        eta[s] = np.bincount(choice[:, s], minlength=env.n_modes)
    return eta / len(dataset)


def exit_probability_mms(policy, env):
    """One-hot exit distribution of a one-shot confidence-blind policy."""
    eta = np.zeros((env.n_states, env.n_modes))
    eta[np.arange(env.n_states), np.asarray(policy.actions)] = 1.0
    return eta


def exit_probability_mc(controller, env, dataset, start, rollouts, seed):
    """Monte Carlo single-epoch exit distribution from a fixed (b, h)."""
    b0, h0 = start
    rng = np.random.default_rng(seed)
    t_slots = env.epoch.T
    costs = env.battery.cost
    b_max = env.battery.b_max
    cum_chain = np.cumsum(env.chain.transition, axis=1)
    cum_arr = np.cumsum(env.arrivals.pmf_per_state, axis=1)
    rec_idx = rng.integers(len(dataset), size=rollouts)
    u_h = rng.random((rollouts, t_slots))
    u_e = rng.random((rollouts, t_slots))
    u_dec = rng.random(rollouts)
    counts = np.zeros(env.n_modes, dtype=np.int64)
    for n in range(rollouts):
        b, h = b0, h0
        z_rec = dataset.z[rec_idx[n]]
        if controller.incremental:
            xi = 0
            for tau in range(t_slots):
                alpha = controller.decide_sub(b, h, xi, tau, z_rec[xi], u_dec[n])
                c = costs[xi + 1] - costs[xi] if alpha else 0
                h2 = int(np.searchsorted(cum_chain[h], u_h[n, tau]))
                src = h2 if env.condition_on_next else h
                e = int(np.searchsorted(cum_arr[src], u_e[n, tau]))
                b = min(max(b - c + e, 0), b_max)
                h = h2
                xi += alpha
            counts[xi] += 1
        else:
            counts[controller.decide(b, h, z_rec, u_dec[n])] += 1
    return counts / rollouts


@dataclass(frozen=True)
class SweepGrid:
    """Cartesian environment grid plus simulation protocol parameters."""

    p_g: tuple = (0.5, 0.7, 0.9)
    p_b: tuple = (0.3, 0.5, 0.9)
    pe_g: tuple = (0.3, 0.7, 0.8, 1.0)
    pe_b: tuple = (0.0, 0.2, 0.3, 0.5)
    b_max: tuple = (3, 5, 10, 20, 30)
    seeds: tuple = (0,)
    episodes: int = 30
    epochs: int = 5000
    costs: tuple = (0, 1, 2, 3)
    T: int = 3
    gamma: float = 0.9

    def __post_init__(self):
        for name in ("p_g", "p_b", "pe_g", "pe_b", "b_max", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} must be nonempty")

    def cells(self):
        return list(product(self.p_g, self.p_b, self.pe_g, self.pe_b, self.b_max))


_SWEEP_KINDS = ("MmS", "IncIAgEE", "OsIAwOracle", "RandomFeasible")


def _sweep_cell(args):
    grid, cell, kinds, z, correct, oracle_eps = args
    from .confidence import ConfidenceDataset

    dataset = ConfidenceDataset(z, correct)
    p_g, p_b, pe_g, pe_b, b_max = cell
    env = two_state_env(p_g, p_b, pe_g, pe_b, b_max, costs=grid.costs,
                        T=grid.T, gamma=grid.gamma)
    mu = energy_rate(env.chain, env.arrivals, env.epoch.T)
    rho = exit_accuracy(dataset)
    controllers = {}
    for kind in kinds:
        if kind == "MmS":
            _, pol = mdp_mod.policy_iteration(mdp_mod.build_mms_mdp(env, rho))
            controllers[kind] = MmsController(pol, env)
        elif kind == "IncIAgEE":
            _, pol = mdp_mod.value_iteration(mdp_mod.build_inc_iag_mdp(env, rho), eps=1e-8)
            controllers[kind] = IncTableController(pol, env)
        elif kind == "OsIAwOracle":
            sol = oracle_mod.solve_oracle(env, dataset, eps=oracle_eps)
            controllers[kind] = OracleController(sol, env)
        elif kind == "RandomFeasible":
            controllers[kind] = RandomFeasibleController(env)
        elif kind.startswith("FixedMode(") and kind.endswith(")"):
            controllers[kind] = FixedModeController(int(kind[10:-1]), env)
        else:
            raise ValueError(
                f"sweep does not support controller kind {kind!r}; train networks "
                "separately and evaluate them with simulate()"
            )
    rows = []
    for seed in grid.seeds:
        for kind in kinds:
            results = simulate(controllers[kind], env, dataset,
                               grid.episodes, grid.epochs, seed)
            mean, lo, hi = aggregate_accuracy(results)
            hist = np.sum([r.exit_hist for r in results], axis=0)
            hist = hist / hist.sum()
            row = {
                "p_h_G": p_g, "p_h_B": p_b, "p_e_G": pe_g, "p_e_B": pe_b,
                "b_max": b_max, "mu": mu, "controller": kind, "seed": seed,
                "accuracy": mean, "ci_low": lo, "ci_high": hi,
            }
            for k in range(env.n_modes):
                row[f"exit_hist_{k}"] = float(hist[k])
            rows.append(row)
    return rows


def sweep(grid, kinds, dataset, oracle_eps=1e-6, jobs=1):
    """Simulate every controller kind over the whole environment grid.

    Network-based kinds are rejected: a sweep would have to train one
    network per cell, which is out of scope here. Cells run independently
    (optionally in parallel); row order is deterministic in cell order.
    """
    cells = grid.cells()
    args = [(grid, cell, tuple(kinds), dataset.z, dataset.correct, oracle_eps)
            for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_cell = list(pool.map(_sweep_cell, args))
    else:
        per_cell = [_sweep_cell(a) for a in args]
    return [row for rows in per_cell for row in rows]


def mu_bucket(mu):
    """Environments are grouped by energy rate rounded to 2 decimals."""
    return round(float(mu), 2)


def group_rows_by_mu(rows):
    grouped = {}
    for row in rows:
        grouped.setdefault(mu_bucket(row["mu"]), []).append(row)
    return grouped


def results_columns(n_modes):
    return [
        "p_h_G", "p_h_B", "p_e_G", "p_e_B", "b_max", "mu", "controller",
        "seed", "accuracy", "ci_low", "ci_high",
    ] + [f"exit_hist_{k}" for k in range(n_modes)]


def _fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.10g}"


def write_results_csv(rows, path, n_modes, meta=None):
    """Sweep/simulate rows as CSV with '#' metadata comment lines first."""
    cols = results_columns(n_modes)
    with open(path, "w") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key}={val}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def read_results_csv(path):
    rows = []
    meta = {}
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = line.split(",")
            row = {}
            for col, val in zip(header, vals):
                if col == "controller":
                    row[col] = val
                elif col in ("b_max", "seed"):
                    row[col] = int(val)
                else:
                    row[col] = float(val)
            rows.append(row)
    return rows, meta


def write_eta_csv(eta, env, path, meta=None):
    """Exit-probability table as CSV rows (b, h, k, eta)."""
    with open(path, "w") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key}={val}\n")
        fh.write("b,h,k,eta\n")
        for s in range(env.n_states):
            state = env.state_of(s)
            label = env.chain.states[state.h]
            for k in range(env.n_modes):
                fh.write(f"{state.b},{label},{k},{eta[s, k]:.10g}\n")


def config_fingerprint(payload):
    """Short stable hash of a JSON-serializable configuration."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
