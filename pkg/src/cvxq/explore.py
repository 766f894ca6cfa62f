"""Deterministic exploration: probe signals, feedback policies, rollouts."""
from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .env import ControlSystem, InadmissibleInput


# -- probe signals -------------------------------------------------------------

class ProbeSignal:
    """Base class for deterministic probes xi(k) with values in R^p."""

    dim: int = 1

    def sequence(self, N: int) -> np.ndarray:
        raise NotImplementedError

    def bound(self) -> float:
        return np.inf


class SinusoidProbe(ProbeSignal):
    """xi_i(k) = sum_j a_ij sin(w_ij k + phi_ij).

    ``frequencies``, ``amplitudes`` and ``phases`` broadcast to shape (p, n_terms);
    1-d inputs give a scalar probe.
    """

    kind = "sinusoid_mixture"

    def __init__(self, frequencies, amplitudes=1.0, phases=0.0):
        w = np.atleast_2d(np.asarray(frequencies, float))
        a = np.broadcast_to(np.atleast_2d(np.asarray(amplitudes, float)), w.shape)
        ph = np.broadcast_to(np.atleast_2d(np.asarray(phases, float)), w.shape)
        self.frequencies, self.amplitudes, self.phases = w, np.array(a), np.array(ph)
        self.dim = w.shape[0]

    def at(self, k) -> np.ndarray:
        k = np.asarray(k, float)
        arg = self.frequencies[None] * k.reshape(-1, 1, 1) + self.phases[None]
        return np.sum(self.amplitudes[None] * np.sin(arg), axis=2)

    def sequence(self, N):
        return self.at(np.arange(N))

    def bound(self):
        return float(np.abs(self.amplitudes).sum())


class MarkovProbe(ProbeSignal):
    """xi(k+1) = H(xi(k)); ``output`` maps the internal state to the probe value."""

    kind = "markov_map"

    def __init__(self, H: Callable, xi0, output: Optional[Callable] = None, bound=np.inf):
        self.H = H
        self.xi0 = np.atleast_1d(np.asarray(xi0, float))
        self.output = output or (lambda s: s)
        self.dim = np.atleast_1d(self.output(self.xi0)).size
        self._bound = bound

    def sequence(self, N):
        out = np.empty((N, self.dim))
        s = self.xi0.copy()
        for k in range(N):
            out[k] = self.output(s)
            s = np.atleast_1d(self.H(s))
        return out

    def bound(self):
        return self._bound


def rotation_probe(omega=np.sqrt(2) - 1, xi0=0.0) -> MarkovProbe:
    """Irrational rotation on the unit circle; equidistributed on [0, 1)."""
    return MarkovProbe(lambda s: np.mod(s + omega, 1.0), [xi0], bound=1.0)


def default_probe(amplitude=1.0) -> SinusoidProbe:
    """Three sinusoids at 2 pi sqrt{2,3,5} / 50 with equal amplitudes summing to ``amplitude``."""
    w = 2 * np.pi * np.sqrt([2.0, 3.0, 5.0]) / 50.0
    return SinusoidProbe(w, amplitude / 3.0, 0.0)


# -- policies ------------------------------------------------------------------

class ExplorationPolicy:
    """Feedback map u = phi(x, xi)."""

    def __call__(self, x, xi) -> np.ndarray:
        raise NotImplementedError


class ConstantPolicy(ExplorationPolicy):
    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, float))

    def __call__(self, x, xi):
        return self.u


class LinearFeedbackPolicy(ExplorationPolicy):
    """u = -K x + gain * xi (first m probe components)."""

    def __init__(self, K, gain=1.0):
        self.K = np.atleast_2d(np.asarray(K, float))
        self.gain = gain

    def __call__(self, x, xi):
        m = self.K.shape[0]
        return -self.K @ np.atleast_1d(x) + self.gain * np.resize(np.ravel(xi), m)


class RelayPolicy(ExplorationPolicy):
    """u = sign(v + gain * xi) on a two-input system (Mountain Car default).

    Pushing along the current velocity pumps energy; the probe perturbs the
    switching surface so that the trajectory does not lock onto one orbit.
    """

    def __init__(self, gain=0.02, velocity_index=1):
        self.gain = gain
        self.velocity_index = velocity_index

    def __call__(self, x, xi):
        s = x[self.velocity_index] + self.gain * float(np.ravel(xi)[0])
        return np.array([1.0 if s >= 0 else -1.0])


class IndexPolicy(ExplorationPolicy):
    """Finite inputs: pick index floor(xi * m) for a probe in [0, 1)."""

    def __init__(self, inputs):
        self.inputs = np.asarray(inputs, float).reshape(len(inputs), -1)

    def __call__(self, x, xi):
        m = len(self.inputs)
        j = min(int(np.floor(float(np.ravel(xi)[0]) * m)), m - 1)
        return self.inputs[max(j, 0)]


class RotorPolicy(ExplorationPolicy):
    """Finite inputs: each state cycles through its inputs on successive visits.

    On a strongly connected transition graph every pair is used within
    2 * diameter * (number of pairs) steps.  The probe is ignored; the
    per-state counters are the exploration state.
    """

    def __init__(self, inputs):
        self.inputs = np.asarray(inputs, float).reshape(len(inputs), -1)
        self.counters = {}

    def reset(self):
        self.counters.clear()

    def __call__(self, x, xi):
        key = tuple(np.ravel(x).tolist())
        j = self.counters.get(key, 0)
        self.counters[key] = j + 1
        return self.inputs[j % len(self.inputs)]


class EpsilonGreedyPolicy(ExplorationPolicy):
    """Experimental: greedy for the current estimate unless the probe says explore.

    ``xi`` is expected in [0, 1) on its first coordinate (e.g. a rotation probe);
    values below ``eps`` hand control to ``base``.  No stability claim is made.
    """

    def __init__(self, greedy: Callable, base: ExplorationPolicy, eps=0.1):
        self.greedy, self.base, self.eps = greedy, base, eps

    def __call__(self, x, xi):
        v = float(np.ravel(xi)[0])
        if v < self.eps:
            return self.base(x, np.array([v / self.eps]))
        return np.atleast_1d(self.greedy(x))


# -- trajectories ---------------------------------------------------------------

@dataclasses.dataclass
class Trajectory:
    """Observed tuples (x(k), u(k), c(k), x(k+1)) for k < N."""

    x: np.ndarray
    u: np.ndarray
    c: np.ndarray
    x_next: np.ndarray
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, float).reshape(len(self.x), -1)
        self.u = np.asarray(self.u, float).reshape(len(self.u), -1)
        self.x_next = np.asarray(self.x_next, float).reshape(len(self.x_next), -1)
        self.c = np.asarray(self.c, float).ravel()
        n = len(self.c)
        if not (len(self.x) == len(self.u) == len(self.x_next) == n):
            raise ValueError("trajectory arrays have inconsistent lengths")

    def __len__(self):
        return len(self.c)

    def window(self, start, stop) -> "Trajectory":
        xi = None if self.xi is None else self.xi[start:stop]
        return Trajectory(self.x[start:stop], self.u[start:stop], self.c[start:stop],
                          self.x_next[start:stop], xi)

    def concat(self, other: "Trajectory") -> "Trajectory":
        xi = None
        if self.xi is not None and other.xi is not None:
            xi = np.vstack([self.xi, other.xi])
        return Trajectory(np.vstack([self.x, other.x]), np.vstack([self.u, other.u]),
                          np.concatenate([self.c, other.c]),
                          np.vstack([self.x_next, other.x_next]), xi)

    def check_replay(self, sys: ControlSystem, atol=0.0) -> bool:
        """True when every recorded successor and cost reproduce under ``sys``."""
        for k in range(len(self)):
            if not np.allclose(sys.step(self.x[k], self.u[k]), self.x_next[k], rtol=0, atol=atol):
                return False
            if abs(sys.cost(self.x[k], self.u[k]) - self.c[k]) > atol:
                return False
        return True

    def input_indices(self, sys: ControlSystem) -> np.ndarray:
        inputs = sys.inputs
        eq = np.all(np.isclose(self.u[:, None, :], inputs[None, :, :]), axis=2)
        if not np.all(eq.any(axis=1)):
            raise InadmissibleInput("trajectory contains inputs outside the finite input set")
        return eq.argmax(axis=1)

    # I/O
    def save(self, path):
        path = Path(path)
        if path.suffix == ".csv":
            return self.to_csv(path)
        arrays = dict(x=self.x, u=self.u, c=self.c, x_next=self.x_next)
        if self.xi is not None:
            arrays["xi"] = self.xi
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        if path.suffix == ".csv":
            return cls.from_csv(path)
        with np.load(path) as z:
            return cls(z["x"], z["u"], z["c"], z["x_next"], z["xi"] if "xi" in z else None)

    def to_csv(self, path):
        n, m = self.x.shape[1], self.u.shape[1]
        header = (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
                  + ["c"] + [f"x_next{i}" for i in range(n)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                row = np.concatenate([self.x[k], self.u[k], [self.c[k]], self.x_next[k]])
                w.writerow([k, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], float).reshape(len(rows) - 1, len(rows[0]))
        xs = [i for i, h in enumerate(header) if h.startswith("x") and not h.startswith("x_next")]
        us = [i for i, h in enumerate(header) if h.startswith("u")]
        xn = [i for i, h in enumerate(header) if h.startswith("x_next")]
        ci = header.index("c")
        return cls(body[:, xs], body[:, us], body[:, ci], body[:, xn])


def cycle_starts(starts, max_len: Optional[int] = None) -> Callable:
    """Restart rule: jump to the next start in the list when the equilibrium is
    reached, or after ``max_len`` steps in the current episode."""
    starts = np.asarray(starts, float)
    state = {"i": 0, "t": 0}

    def restart(k, x, at_equilibrium):
        state["t"] += 1
        if not at_equilibrium and (max_len is None or state["t"] < max_len):
            return None
        state["t"] = 0
        s = starts[state["i"] % len(starts)]
        state["i"] += 1
        return s

    return restart


def grid_starts(lo, hi, shape, seed=None) -> np.ndarray:
    """Rectangular grid of start states, shuffled when ``seed`` is given."""
    axes = [np.linspace(a, b, n) for a, b, n in zip(lo, hi, shape)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
    if seed is not None:
        pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    return pts


def rollout(sys: ControlSystem, policy: ExplorationPolicy, probe: ProbeSignal, x0, N: int,
            *, restart: Optional[Callable] = None) -> Trajectory:
    """Simulate N steps of x(k+1) = F(x(k), phi(x(k), xi(k))).

    ``restart(k, x, at_equilibrium)`` may return a new state to continue from
    (a new episode); the recorded tuples remain individually replayable.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    x = np.atleast_1d(np.asarray(x0, float)).copy()
    xi = probe.sequence(N)
    xe, _ = sys.equilibrium
    X = np.empty((N, x.size))
    U = np.empty((N, sys.input_dim))
    C = np.empty(N)
    Xn = np.empty((N, x.size))
    for k in range(N):
        u = np.atleast_1d(np.asarray(policy(x, xi[k]), float))
        try:
            xn = sys.step(x, u)
        except InadmissibleInput as exc:
            raise InadmissibleInput(f"policy emitted inadmissible input at k={k}: {exc}") from exc
        X[k], U[k], C[k], Xn[k] = x, u, sys.cost(x, u), xn
        x = xn
        if restart is not None:
            new = restart(k, x, bool(np.allclose(x, xe)))
            if new is not None:
                x = np.atleast_1d(np.asarray(new, float)).copy()
    return Trajectory(X, U, C, Xn, xi)


def ergodic_average(traj: Trajectory, g: Callable) -> np.ndarray:
    """(1/N) sum_k g(x(k), u(k), x(k+1)); ``g`` is applied to stacked arrays."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    vals = np.asarray(g(traj.x, traj.u, traj.x_next), float)
    if vals.ndim == 0:
        return vals
    vals = vals.reshape(len(traj), -1) if vals.shape[0] == len(traj) else vals
    return vals.mean(axis=0).squeeze()


def exhaustive_trajectory(sys, repeats: int = 1) -> Trajectory:
    """Every admissible (x, u) pair of a finite system, each as one replayable tuple.

    Pairs are listed state-major; ``repeats`` stacks copies so windows can
    be made stationary (identical statistics in every batch).
    """
    rows = []
    for x in range(sys.n_states):
        for u in sys.admissible_inputs(np.array([x], float)):
            rows.append((x, int(np.asarray(u).ravel()[0])))
    rows = rows * int(repeats)
    X = np.array([[x] for x, _ in rows], float)
    U = np.array([[j] for _, j in rows], float)
    C = np.array([sys.cost(X[i], U[i]) for i in range(len(rows))])
    Xn = np.array([sys.step(X[i], U[i]) for i in range(len(rows))])
    return Trajectory(X, U, C, Xn, np.zeros((len(rows), 1)))
