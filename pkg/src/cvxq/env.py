"""Deterministic control systems and criterion transformations.

Every system exposes ``step(x, u)``, ``cost(x, u)`` and an equilibrium
``(xe, ue)`` with ``step(xe, ue) == xe`` and ``cost(xe, ue) == 0``.  States are
1-d float arrays; finite systems use a length-1 array holding the state index.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np


class InadmissibleInput(ValueError):
    """Raised when an input outside the admissible set is applied."""


class ControlSystem:
    """Base class.  Subclasses implement ``_step`` and ``_cost``."""

    state_dim: int = 1
    input_dim: int = 1
    #: finite input values, shape (n_inputs, input_dim); None for continuous inputs
    inputs: Optional[np.ndarray] = None
    discount: float = 1.0

    @property
    def equilibrium(self):
        raise NotImplementedError

    @property
    def n_inputs(self) -> Optional[int]:
        return None if self.inputs is None else len(self.inputs)

    def admissible_inputs(self, x):
        return self.inputs

    def input_index(self, u) -> int:
        """Index of ``u`` in the finite input list; raises if inadmissible."""
        if self.inputs is None:
            raise InadmissibleInput("system has a continuous input set")
        u = np.atleast_1d(np.asarray(u, float))
        hit = np.flatnonzero(np.all(np.isclose(self.inputs, u), axis=1))
        if hit.size == 0:
            raise InadmissibleInput(f"input {u} not in {self.inputs.ravel().tolist()}")
        return int(hit[0])

    def check_input(self, x, u):
        u = np.atleast_1d(np.asarray(u, float))
        if u.shape != (self.input_dim,):
            raise InadmissibleInput(f"input has shape {u.shape}, expected ({self.input_dim},)")
        if self.inputs is not None:
            adm = self.admissible_inputs(x)
            if not np.any(np.all(np.isclose(adm, u), axis=1)):
                raise InadmissibleInput(f"input {u} inadmissible at state {np.asarray(x)}")
        return u

    def step(self, x, u) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, float))
        u = self.check_input(x, u)
        return self._step(x, u)

    def cost(self, x, u) -> float:
        x = np.atleast_1d(np.asarray(x, float))
        u = np.atleast_1d(np.asarray(u, float))
        return float(self._cost(x, u))

    def _step(self, x, u):
        raise NotImplementedError

    def _cost(self, x, u):
        raise NotImplementedError


@dataclasses.dataclass(frozen=True)
class MountainCarSystem(ControlSystem):
    """Minimum-time Mountain Car with projected position/velocity updates.

    The goal line ``z >= z_goal`` is collapsed to the single absorbing state
    ``(z_goal, 0)``; cost is one everywhere else.
    """

    z_min: float = -1.2
    z_goal: float = 0.5
    v_bar: float = 0.07
    thrust: float = 1e-3
    gravity: float = 2.5e-3
    velocity_first: bool = True
    reset_velocity_at_wall: bool = True
    discount: float = 1.0

    state_dim = 2
    input_dim = 1
    inputs = np.array([[-1.0], [1.0]])

    @property
    def equilibrium(self):
        return np.array([self.z_goal, 0.0]), self.inputs[0].copy()

    def at_goal(self, x) -> bool:
        return bool(np.asarray(x)[0] >= self.z_goal)

    def _step(self, x, u):
        z, v = float(x[0]), float(x[1])
        if z >= self.z_goal:
            return np.array([self.z_goal, 0.0])
        v_new = v + self.thrust * float(u[0]) - self.gravity * np.cos(3.0 * z)
        v_new = min(max(v_new, -self.v_bar), self.v_bar)
        z_new = z + (v_new if self.velocity_first else v)
        z_new = min(max(z_new, self.z_min), self.z_goal)
        if z_new <= self.z_min and self.reset_velocity_at_wall and v_new < 0:
            v_new = 0.0
        if z_new >= self.z_goal:
            return np.array([self.z_goal, 0.0])
        return np.array([z_new, v_new])

    def step_many(self, X, u_values):
        """Vectorized step for states X (n, 2) and scalar inputs (n,)."""
        X = np.asarray(X, float)
        z, v = X[:, 0], X[:, 1]
        u = np.broadcast_to(np.asarray(u_values, float), z.shape)
        v_new = np.clip(v + self.thrust * u - self.gravity * np.cos(3.0 * z), -self.v_bar, self.v_bar)
        z_new = np.clip(z + (v_new if self.velocity_first else v), self.z_min, self.z_goal)
        if self.reset_velocity_at_wall:
            v_new = np.where((z_new <= self.z_min) & (v_new < 0), 0.0, v_new)
        goal = (z >= self.z_goal) | (z_new >= self.z_goal)
        z_new = np.where(goal, self.z_goal, z_new)
        v_new = np.where(goal, 0.0, v_new)
        return np.column_stack([z_new, v_new])

    def _cost(self, x, u):
        return 0.0 if x[0] >= self.z_goal else 1.0

    def in_box(self, x) -> bool:
        x = np.asarray(x)
        return bool(self.z_min <= x[0] <= self.z_goal and -self.v_bar <= x[1] <= self.v_bar)


@dataclasses.dataclass(frozen=True)
class LqrSystem(ControlSystem):
    """x+ = F x + G u with cost x'Sx + u'Ru."""

    F: np.ndarray
    G: np.ndarray
    S: np.ndarray
    R: np.ndarray
    discount: float = 1.0

    inputs = None

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, float))
        G = np.asarray(self.G, float)
        G = G.reshape(F.shape[0], -1)
        S = np.atleast_2d(np.asarray(self.S, float))
        R = np.atleast_2d(np.asarray(self.R, float))
        n, m = G.shape
        if F.shape != (n, n) or S.shape != (n, n) or R.shape != (m, m):
            raise ValueError("inconsistent LQR dimensions")
        if np.linalg.eigvalsh(0.5 * (S + S.T))[0] < -1e-12:
            raise ValueError("S must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (R + R.T))[0] <= 0:
            raise ValueError("R must be positive definite")
        for name, val in (("F", F), ("G", G), ("S", S), ("R", R)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_output(cls, F, G, H, R, discount=1.0):
        H = np.atleast_2d(np.asarray(H, float))
        return cls(F, G, H.T @ H, R, discount)

    @property
    def state_dim(self):
        return self.F.shape[0]

    @property
    def input_dim(self):
        return self.G.shape[1]

    @property
    def equilibrium(self):
        return np.zeros(self.state_dim), np.zeros(self.input_dim)

    def _step(self, x, u):
        return self.F @ x + self.G @ u

    def _cost(self, x, u):
        return x @ self.S @ x + u @ self.R @ u


class FiniteSystem(ControlSystem):
    """Explicit transition table over a finite state/input space.

    ``next_state[x, u]`` is the successor of state ``x`` under input index ``u``;
    ``cost[x, u]`` the one-step cost.  ``admissible`` optionally masks pairs.
    """

    def __init__(self, next_state, cost, equilibrium=(0, 0), admissible=None, discount=1.0):
        nxt = np.asarray(next_state)
        c = np.asarray(cost, float)
        if nxt.ndim != 2 or c.shape != nxt.shape:
            raise ValueError("next_state and cost must be (n_states, n_inputs) tables")
        if not np.issubdtype(nxt.dtype, np.integer):
            if not np.all(nxt == np.round(nxt)):
                raise ValueError("next_state entries must be integer state indices")
            nxt = nxt.astype(int)
        nX, nU = nxt.shape
        if nxt.min() < 0 or nxt.max() >= nX:
            raise ValueError("successor index out of range")
        if np.any(c < 0):
            raise ValueError("costs must be non-negative")
        xe, ue = int(equilibrium[0]), int(equilibrium[1])
        if nxt[xe, ue] != xe:
            raise ValueError("equilibrium is not a fixed point of the dynamics")
        if c[xe, ue] != 0:
            raise ValueError("cost must vanish at the equilibrium")
        self.next_state = nxt
        self.cost_table = c
        self.admissible = np.ones_like(nxt, bool) if admissible is None else np.asarray(admissible, bool)
        if not self.admissible[xe, ue]:
            raise ValueError("equilibrium input must be admissible")
        self.xe, self.ue = xe, ue
        self.inputs = np.arange(nU, dtype=float)[:, None]
        self.discount = float(discount)
        self.state_dim = 1
        self.input_dim = 1

    n_states = property(lambda self: self.next_state.shape[0])

    @property
    def equilibrium(self):
        return np.array([float(self.xe)]), np.array([float(self.ue)])

    def admissible_inputs(self, x):
        return self.inputs[self.admissible[int(np.asarray(x).ravel()[0])]]

    def _idx(self, x, u):
        i = int(round(float(np.asarray(x).ravel()[0])))
        j = int(round(float(np.asarray(u).ravel()[0])))
        if not (0 <= i < self.n_states):
            raise ValueError(f"state {i} out of range")
        return i, j

    def _step(self, x, u):
        i, j = self._idx(x, u)
        return np.array([float(self.next_state[i, j])])

    def _cost(self, x, u):
        i, j = self._idx(x, u)
        return self.cost_table[i, j]

    def with_discount(self, gamma):
        return FiniteSystem(self.next_state, self.cost_table, (self.xe, self.ue),
                            self.admissible, gamma)


def random_finite_system(n_states=8, n_inputs=3, seed=0, cost_range=(0.5, 2.0)) -> FiniteSystem:
    """Random strongly connected system; state 0 with the last input is the equilibrium.

    Input 0 walks the cycle 0 -> 1 -> ... -> n-1 -> 0, so every state reaches the
    equilibrium and every pair can be visited by exploration.
    """
    if n_inputs < 2:
        raise ValueError("need at least two inputs")
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, n_states, size=(n_states, n_inputs))
    nxt[:, 0] = (np.arange(n_states) + 1) % n_states
    cost = rng.uniform(*cost_range, size=(n_states, n_inputs))
    ue = n_inputs - 1
    nxt[0, ue] = 0
    cost[0, ue] = 0.0
    return FiniteSystem(nxt, cost, (0, ue))


def step(sys: ControlSystem, x, u):
    """Apply the dynamics; rejects inadmissible inputs."""
    return sys.step(x, u)


def apply_discount(sys: ControlSystem, gamma: float) -> ControlSystem:
    """Return a copy of ``sys`` whose criterion is discounted by ``gamma``.

    Downstream losses use Q(x,u) = c(x,u) + gamma J(F(x,u)); gamma = 1 is the
    total-cost criterion.
    """
    gamma = float(gamma)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"discount factor must lie in [0, 1], got {gamma}")
    if isinstance(sys, FiniteSystem):
        return sys.with_discount(gamma)
    if dataclasses.is_dataclass(sys):
        return dataclasses.replace(sys, discount=gamma)
    out = _Wrapped(sys)
    out.discount = gamma
    return out


class _Wrapped(ControlSystem):
    def __init__(self, base):
        self.base = base
        self.state_dim = base.state_dim
        self.input_dim = base.input_dim
        self.inputs = base.inputs

    @property
    def equilibrium(self):
        return self.base.equilibrium

    def admissible_inputs(self, x):
        return self.base.admissible_inputs(x)

    def _step(self, x, u):
        return self.base._step(x, u)

    def _cost(self, x, u):
        return self.base._cost(x, u)


def to_total_cost_spp(sys: FiniteSystem, target, terminal_cost=None, gamma: float = 1.0) -> FiniteSystem:
    """Shortest-path problem with target set ``target`` as a total-cost system.

    A graveyard state (index ``n_states``) is appended.  States in the target
    set pay the terminal cost and jump to the graveyard, which is absorbing
    with zero cost.
    """
    if not isinstance(sys, FiniteSystem):
        raise TypeError("shortest-path transformation is tabulated for FiniteSystem")
    target = np.unique(np.atleast_1d(np.asarray(target, int)))
    if target.size == 0:
        raise ValueError("target set must be non-empty")
    nX, nU = sys.next_state.shape
    J0 = np.zeros(nX) if terminal_cost is None else np.asarray(terminal_cost, float)
    if J0.shape != (nX,) or np.any(J0 < 0):
        raise ValueError("terminal cost must be a non-negative vector over states")
    g = nX
    nxt = np.vstack([sys.next_state, np.full((1, nU), g)])
    cost = np.vstack([sys.cost_table, np.zeros((1, nU))])
    nxt[target, :] = g
    cost[target, :] = J0[target][:, None]
    adm = np.vstack([sys.admissible, np.ones((1, nU), bool)])
    # in the graveyard every input is equivalent; use the first one as equilibrium input
    return FiniteSystem(nxt, cost, (g, 0), adm, gamma)


def to_total_cost_finite_horizon(sys: FiniteSystem, horizon: int) -> FiniteSystem:
    """Finite-horizon problem as a total-cost system on (state, clock) pairs.

    State index ``clock * n_states + x`` for clock in 0..K+1; clock K+1 is the
    absorbing zero-cost layer.
    """
    if not isinstance(sys, FiniteSystem):
        raise TypeError("finite-horizon transformation is tabulated for FiniteSystem")
    K = int(horizon)
    if K < 1:
        raise ValueError("horizon must be at least 1")
    nX, nU = sys.next_state.shape
    layers = K + 2
    nxt = np.empty((layers * nX, nU), int)
    cost = np.zeros((layers * nX, nU))
    adm = np.tile(sys.admissible, (layers, 1))
    for t in range(layers):
        t_next = min(t + 1, K + 1)
        nxt[t * nX:(t + 1) * nX] = t_next * nX + sys.next_state
        if t <= K:
            cost[t * nX:(t + 1) * nX] = sys.cost_table
    xe = (K + 1) * nX + sys.xe
    nxt[xe, sys.ue] = xe
    return FiniteSystem(nxt, cost, (xe, sys.ue), adm)


def horizon_state(sys: FiniteSystem, x: int, clock: int) -> int:
    """Index of (x, clock) in a system built by ``to_total_cost_finite_horizon``."""
    return clock * sys.n_states + x


# -- configuration -----------------------------------------------------------

def system_from_config(cfg: dict) -> ControlSystem:
    """Build a system from a ``{"kind": ..., <parameters>}`` block."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    gamma = cfg.pop("discount", 1.0)
    if kind == "mountain_car":
        sys = MountainCarSystem(**cfg)
    elif kind == "lqr":
        if "H" in cfg:
            sys = LqrSystem.from_output(cfg["F"], cfg["G"], cfg["H"], cfg["R"])
        else:
            sys = LqrSystem(cfg["F"], cfg["G"], cfg["S"], cfg["R"])
    elif kind == "finite":
        if "seed" in cfg:
            sys = random_finite_system(cfg.get("n_states", 8), cfg.get("n_inputs", 3), cfg["seed"])
        else:
            sys = FiniteSystem(cfg["next_state"], cfg["cost"],
                               tuple(cfg.get("equilibrium", (0, 0))), cfg.get("admissible"))
    else:
        raise ValueError(f"unknown system kind {kind!r}")
    return apply_discount(sys, gamma) if gamma != 1.0 else sys


def load_config(path) -> dict:
    """Read a TOML or JSON configuration file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)
