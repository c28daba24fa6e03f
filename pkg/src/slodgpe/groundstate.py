"""Ground-state computation: minimise the modified energy over the unit
sphere with a density-weighted Riemannian gradient descent, switching to a
shifted inverse iteration (at frozen projected density) close to the
minimiser."""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import LinearOperator, gmres, splu

from . import nonlinear


@dataclass
class GroundStateConfig:
    beta: float
    omega: float = 0.0
    switch_residual: float = 0.1
    tol_residual: float = 1e-10
    max_iter: int = 500
    init: object = "gaussian"  # name, or explicit coefficient vector
    seed: int = 0
    line_search_evals: int = 30
    metric_refresh: float = 0.1  # relative L2 density change forcing refactor

    def __post_init__(self):
        if not 0 < self.tol_residual < self.switch_residual:
            raise ValueError("need 0 < tol_residual < switch_residual")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class GroundStateResult:
    state: object
    energy: float
    modified_energy: float
    eigenvalue: float
    modified_eigenvalue: float
    residual_history: list
    iterations: int
    wall_time: float
    converged: bool
    log: list = field(default_factory=list)  # (iter, Etilde, residual, kind)


def residual(state, shift=None, c=None):
    """Mass-inverse norm of the Euler-Lagrange defect; with the default
    stationarity shift it vanishes exactly at critical points."""
    model = state.model
    if c is None:
        c = nonlinear.project_density(state)
    if shift is None:
        return nonlinear.euler_lagrange_residual(state, c)
    r = model.A @ state.U + model.beta * nonlinear.nonlinear_term(state, c)
    if model.omega != 0.0:
        r = r + model.omega * (model.R @ state.U)
    r = r - shift * (model.G @ state.U)
    return float(np.sqrt(np.real(np.conj(r) @ model.solve_gram(r))))


def _gradient_vector(state, c):
    """Euler-Lagrange defect A u + omega R u + beta N(u) - mu G u (tangent to
    the sphere at u for the stationarity multiplier mu)."""
    model = state.model
    g = model.A @ state.U + model.beta * nonlinear.nonlinear_term(state, c)
    if model.omega != 0.0:
        g = g + model.omega * (model.R @ state.U)
    return g - nonlinear.rayleigh(state, c) * (model.G @ state.U)


def _defect_and_residual(state, c):
    """The stationarity defect and its mass-inverse norm in one pass."""
    F = _gradient_vector(state, c)
    r = float(np.sqrt(np.real(np.conj(F) @ state.model.solve_gram(F))))
    return F, r


class _Metric:
    """Factorisation of the density-weighted problem metric
    A + omega R + beta W(rho), refreshed when rho drifts."""

    def __init__(self, model, refresh):
        self.model = model
        self.refresh = refresh
        self._c = None
        self._lu = None

    def _density_drift(self, c):
        G = self.model.G
        d = c - self._c
        num = float(d @ (G @ d))
        den = float(self._c @ (G @ self._c))
        return np.sqrt(num / den) if den > 0 else np.inf

    def solve(self, c, rhs):
        if self._lu is None or self._density_drift(c) > self.refresh:
            m = self.model
            M = m.A + m.beta * m.weighted_gram(c)
            if m.omega != 0.0:
                M = M + m.omega * m.R
            self._complex = m.omega != 0.0
            self._lu = splu(sparse.csc_matrix(M.astype(
                complex if self._complex else float
            )))
            self._c = c.copy()
        if np.iscomplexobj(rhs) and not self._complex:
            return self._lu.solve(rhs.real) + 1j * self._lu.solve(rhs.imag)
        return self._lu.solve(np.asarray(
            rhs, dtype=complex if self._complex else float
        ))


def _golden_section(f, a, b, max_evals):
    """Golden-section search for the minimum of f on [a, b]; returns the best
    (t, f(t)) among all evaluations."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    best = min((fc, c), (fd, d))
    for _ in range(max_evals - 2):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
            best = min(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
            best = min(best, (fd, d))
    return best[1], best[0]


def _path_energy(model, U, d, b_uu=None):
    """Closed form of tau -> Etilde(normalise(U - tau d)): the quadratic part
    and the mass are degree-2 polynomials, the projected quartic term is a
    degree-4 polynomial (three density loads and their Gram pairings).
    ``b_uu`` is the current density load (equal to G @ project_density), if
    already available."""
    Ahat = model.A if model.omega == 0.0 else model.A + model.omega * model.R
    uf, df = model.phi @ U, model.phi @ d
    a0 = float(np.real(np.conj(U) @ (Ahat @ U)))
    a1 = -2.0 * float(np.real(np.conj(U) @ (Ahat @ d)))
    a2 = float(np.real(np.conj(d) @ (Ahat @ d)))
    m0 = float(np.real(np.conj(U) @ (model.G @ U)))
    m1 = -2.0 * float(np.real(np.conj(U) @ (model.G @ d)))
    m2 = float(np.real(np.conj(d) @ (model.G @ d)))
    # |u - tau d|^2 = rho_uu - 2 tau Re(u conj(d)) + tau^2 rho_dd
    P = model.phi.T
    if b_uu is None:
        b_uu = P @ model.pair_rhs(uf, uf)
    b = np.column_stack([
        b_uu,
        -2.0 * (P @ model.pair_rhs(uf, df)),
        P @ model.pair_rhs(df, df),
    ])
    S = b.T @ np.column_stack([model.solve_gram(b[:, j]) for j in range(3)])
    quart = np.zeros(5)
    for i in range(3):
        for j in range(3):
            quart[i + j] += S[i, j]

    def f(tau):
        n = m0 + tau * (m1 + tau * m2)
        quad = a0 + tau * (a1 + tau * a2)
        q4 = ((((quart[4] * tau + quart[3]) * tau + quart[2]) * tau
               + quart[1]) * tau + quart[0])
        return quad / n + 0.5 * model.beta * q4 / (n * n)

    return f


def _line_search_step(state, d, config, c, etilde):
    """Golden-section minimisation of Etilde along the normalised path
    U - tau d; the bracket is extended while the minimiser sits at its upper
    end (evaluations of the path polynomial are essentially free).  Returns
    (state', c', Etilde', progressed)."""
    model = state.model
    path_energy = _path_energy(model, state.U, d, b_uu=model.G @ c)
    hi = 2.0
    tau, val = _golden_section(path_energy, 0.0, hi,
                               config.line_search_evals)
    while tau > 0.9 * hi and hi < 64.0:
        hi *= 2.0
        tau, val = _golden_section(path_energy, 0.0, hi,
                                   config.line_search_evals)
    if val > etilde - 1e-14 * max(1.0, abs(etilde)):
        return state, c, etilde, False
    new = model.normalise(state.U - tau * d)
    c_new = nonlinear.project_density(new)
    return new, c_new, nonlinear.modified_energy(new, c_new), True


def sobolev_gradient_step(state, metric, config, c=None, etilde=None,
                          grad=None, momentum=None):
    """One energy-adapted descent step with a golden-section line search on
    the normalised path.  With ``momentum`` (a _Momentum holder) the search
    direction is the conjugate-gradient combination of the preconditioned
    gradient with the previous direction (Fletcher-Reeves, restarted when
    the combined direction makes no progress).  Returns
    (state', c', Etilde', progressed)."""
    model = state.model
    if c is None:
        c = nonlinear.project_density(state)
    if etilde is None:
        etilde = nonlinear.modified_energy(state, c)
    if grad is None:
        grad = _gradient_vector(state, c)
    d = metric.solve(c, grad)
    direction = d
    g_m_g = float(np.real(np.conj(grad) @ d))
    if momentum is not None and momentum.direction is not None \
            and momentum.g_m_g > 0.0:
        direction = d + (g_m_g / momentum.g_m_g) * momentum.direction
    out = _line_search_step(state, direction, config, c, etilde)
    if not out[3] and direction is not d:
        # conjugate direction failed: restart with the plain gradient
        out = _line_search_step(state, d, config, c, etilde)
        direction = d
    if momentum is not None:
        if out[3]:
            momentum.direction, momentum.g_m_g = direction, g_m_g
        else:
            momentum.direction, momentum.g_m_g = None, 0.0
    return out


class _Momentum:
    """Carries the previous conjugate-gradient direction between steps."""

    def __init__(self):
        self.direction = None
        self.g_m_g = 0.0


def _newton_direction(state, c, grad=None, reg=0.0):
    """Solve the bordered linearisation of the stationarity system
    A u + omega R u + beta N(u) - lambda G u = 0, u'Gu = 1 for the update
    direction.  The density derivative couples through the Gram inverse; an
    auxiliary unknown y = G^{-1} d(projected density) keeps the system sparse.
    ``reg`` adds a Levenberg shift reg*G to the primal block, taming the
    zero modes of continuous symmetries (global phase is pinned explicitly,
    but a rotationally invariant trap also admits a free lattice rotation).
    """
    model = state.model
    beta, G = model.beta, model.G
    mu = nonlinear.rayleigh(state, c)
    F = _gradient_vector(state, c) if grad is None else grad
    L = model.A + beta * model.weighted_gram(c) - (mu - reg) * G
    if model.omega != 0.0:
        L = L + model.omega * model.R
    Wu = model.weighted_gram_fine(state.fine)
    gu = G @ state.U
    n = len(state.U)
    if not (np.iscomplexobj(state.U) or model.omega != 0.0):
        # real symmetric case: unknowns (du, y, dlambda)
        sys = sparse.bmat(
            [
                [L, beta * Wu, -gu[:, None]],
                [2 * Wu, -G, None],
                [gu[None, :], None, None],
            ],
            format="csc",
        )
        rhs = np.concatenate([-F, np.zeros(n), [0.0]])
        sol = splu(sys).solve(rhs)
        return sol[:n]
    # complex case in real block form; an extra multiplier pins the phase
    Lr, Li = np.real(L).tocsr(), np.imag(L).tocsr()
    Wr, Wi = np.real(Wu).tocsr(), np.imag(Wu).tocsr()
    gur, gui = np.real(gu), np.imag(gu)
    col_l = np.concatenate([-gur, -gui])
    col_t = np.concatenate([gui, -gur])
    sys = sparse.bmat(
        [
            [Lr, -Li, beta * Wr, col_l[:n, None], col_t[:n, None]],
            [Li, Lr, beta * Wi, col_l[n:, None], col_t[n:, None]],
            [2 * Wr, 2 * Wi, -G, None, None],
            [gur[None, :], gui[None, :], None, None, None],
            [-gui[None, :], gur[None, :], None, None, None],
        ],
        format="csc",
    )
    Fr, Fi = np.real(F), np.imag(F)
    rhs = np.concatenate([-Fr, -Fi, np.zeros(n), [0.0, 0.0]])
    # a direct factorisation of the full bordered system is an order of
    # magnitude more expensive than one of the primal block alone, so solve
    # iteratively with a block preconditioner: exact on L and G, identity on
    # the two multipliers
    L_lu = splu(sparse.csc_matrix(L))

    def psolve(z):
        du = L_lu.solve(z[:n] + 1j * z[n:2 * n])
        y = -model.solve_gram(z[2 * n:3 * n])
        return np.concatenate([du.real, du.imag, y, z[3 * n:]])

    prec = LinearOperator(sys.shape, matvec=psolve)
    sol, _ = gmres(sys, rhs, M=prec, rtol=1e-8, atol=0.0,
                   restart=250, maxiter=2)
    return sol[:n] + 1j * sol[n:2 * n]


def _shifted_inverse_vector(state, c):
    """Solve (A + omega R + beta W(c) - mu G) w = G u with the current
    stationarity multiplier mu.  At a stationary state u is an exact
    eigenvector of the frozen-density operator, so this is the Rayleigh
    quotient iteration map; the returned w is G-normalised and phase-aligned
    with u."""
    model = state.model
    mu = nonlinear.rayleigh(state, c)
    M = model.A + model.beta * model.weighted_gram(c) - mu * model.G
    if model.omega != 0.0:
        M = M + model.omega * model.R
    is_complex = np.iscomplexobj(state.U) or model.omega != 0.0
    dtype = complex if is_complex else float
    lu = splu(sparse.csc_matrix(M.astype(dtype)))
    b = model.G @ state.U
    w = lu.solve(np.asarray(b, dtype=dtype))
    if not np.all(np.isfinite(w)):
        raise RuntimeError("singular shifted system")
    overlap = np.conj(b) @ w
    scale = abs(overlap)
    if scale == 0.0:
        raise RuntimeError("orthogonal inverse iterate")
    w = w * (np.conj(overlap) / scale)
    return w / np.sqrt(np.real(np.conj(w) @ (model.G @ w)))


def j_method_step(state, metric, config, c=None, etilde=None, grad=None,
                  r0=None, momentum=None):
    """One endgame step: a damped Newton step on the full linearisation of
    the stationarity system (density derivative included, Levenberg shift
    proportional to the residual), with step halving on residual growth.
    When no damped Newton step contracts the residual, a shifted inverse
    iterate at frozen projected density is tried through the energy line
    search, and a plain gradient step is the last fallback.  The kind tag
    distinguishes the three outcomes ("jmethod", "jdamped", "descent")."""
    model = state.model
    if c is None:
        c = nonlinear.project_density(state)
    if etilde is None:
        etilde = nonlinear.modified_energy(state, c)
    if r0 is None:
        r0 = residual(state, c=c)
    slack = 1e-12 + r0 * r0
    try:
        du = _newton_direction(state, c, grad, reg=r0)
        if not np.all(np.isfinite(du)):
            raise RuntimeError("singular linearisation")
    except RuntimeError:
        du = None
    if du is not None:
        step = 1.0
        for _ in range(7):
            new = model.normalise(state.U + step * du)
            c_new = nonlinear.project_density(new)
            e_new = nonlinear.modified_energy(new, c_new)
            r_new = residual(new, c=c_new)
            if r_new <= 0.9 * r0 and e_new <= etilde + slack:
                return new, c_new, e_new, True, "jmethod"
            step *= 0.5
    try:
        w = _shifted_inverse_vector(state, c)
    except RuntimeError:
        w = None
    if w is not None:
        res = _line_search_step(state, state.U - w, config, c, etilde)
        if res[3]:
            return res + ("jdamped",)
    res = sobolev_gradient_step(state, metric, config, c, etilde, grad,
                                momentum)
    return res + ("descent",)


# ---------------------------------------------------------------------------
# initial values
# ---------------------------------------------------------------------------

def random_rotational_init(model, omega, seed):
    """Randomised vortex-seeding initial value: pointwise
    ((1-omega) xi1 + omega (x+iy) xi2) exp(-(x^2+y^2)) at the fine dofs with
    uniform xi, projected onto the basis span and normalised."""
    fs = model.fine_space
    if fs.mesh.dim != 2:
        raise ValueError("rotational initial value requires dim = 2")
    rng = np.random.default_rng(seed)
    xi1 = rng.uniform(size=fs.n_dofs)
    xi2 = rng.uniform(size=fs.n_dofs)
    x, y = fs.dof_coords[:, 0], fs.dof_coords[:, 1]
    f = ((1 - omega) * xi1 + omega * (x + 1j * y) * xi2) * np.exp(
        -(x ** 2 + y ** 2)
    )
    return model.normalise(model.project_fine(f))


def gaussian_init(model):
    x = model.fine_space.dof_coords
    f = np.exp(-0.5 * np.sum(x ** 2, axis=1))
    return model.normalise(model.project_fine(f))


def thomas_fermi_init(model):
    """sqrt of the inverted-potential density max(mu - V, 0)/beta with mu
    fixed by an approximate unit-mass condition (crude lumped quadrature);
    adequate as a descent starting point."""
    fs = model.fine_space
    V = model.potential(fs.dof_coords)
    lumped = np.asarray(model.mass_fine.sum(axis=1)).ravel()
    beta = max(model.beta, 1.0)

    def mass_of(mu):
        return float(lumped @ np.maximum(mu - V, 0.0)) / beta

    lo, hi = V.min(), V.min() + 1.0
    while mass_of(hi) < 1.0:
        hi = V.min() + 2 * (hi - V.min())
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mass_of(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    f = np.sqrt(np.maximum(0.5 * (lo + hi) - V, 0.0) / beta)
    return model.normalise(model.project_fine(f))


def initial_state(model, config):
    init = config.init
    if isinstance(init, str):
        if init == "gaussian":
            return gaussian_init(model)
        if init == "thomas_fermi":
            return thomas_fermi_init(model)
        if init == "random_rotational":
            return random_rotational_init(model, model.omega, config.seed)
        raise ValueError(f"unknown init {init!r}")
    return model.normalise(np.asarray(init))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def ground_state(config, model, state=None, progress=None):
    """Descent until the residual passes the switch threshold, then inverse
    iteration until the final tolerance.  ``progress``, if given, is called
    as progress(iteration, etilde, residual, kind) after every iteration."""
    t0 = time.perf_counter()
    if state is None:
        state = initial_state(model, config)
    c = nonlinear.project_density(state)
    etilde = nonlinear.modified_energy(state, c)
    metric = _Metric(model, config.metric_refresh)
    momentum = _Momentum()

    grad, r = _defect_and_residual(state, c)
    history = [r]
    log = [(0, etilde, r, "init")]
    converged = r <= config.tol_residual
    iters = 0
    stalls = 0
    # after a rejected Newton step the linearisation is not trusted again
    # until the residual has halved (or a descent budget is spent); the
    # bordered solve is far more expensive than a descent iteration
    retry_below, backoff = np.inf, 0
    while not converged and iters < config.max_iter:
        iters += 1
        if r >= config.switch_residual or (backoff > 0 and r > retry_below):
            backoff = max(backoff - 1, 0)
            state, c, etilde, progressed = sobolev_gradient_step(
                state, metric, config, c, etilde, grad, momentum
            )
            kind = "descent"
        else:
            r_at_attempt = r
            state, c, etilde, progressed, kind = j_method_step(
                state, metric, config, c, etilde, grad, r, momentum
            )
            if kind != "descent":
                momentum.direction, momentum.g_m_g = None, 0.0
            if kind == "jmethod":
                retry_below, backoff = np.inf, 0
            else:
                retry_below, backoff = 0.5 * r_at_attempt, 50
        grad, r = _defect_and_residual(state, c)
        history.append(r)
        log.append((iters, etilde, r, kind))
        if progress is not None:
            progress(iters, etilde, r, kind)
        if r <= config.tol_residual:
            converged = True
            break
        stalls = 0 if progressed else stalls + 1
        if stalls >= 2:
            break

    E = nonlinear.energy(state)
    lam = nonlinear.eigenvalue(state)
    lam_t = nonlinear.modified_eigenvalue(state, c)
    return GroundStateResult(
        state=state,
        energy=E,
        modified_energy=etilde,
        eigenvalue=lam,
        modified_eigenvalue=lam_t,
        residual_history=history,
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        log=log,
    )
