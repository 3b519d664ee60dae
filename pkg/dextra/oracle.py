import itertools
import logging

import cvxpy as cp
import numpy as np
import scipy.linalg
import scipy.optimize

from dextra.graph import laplacian
from dextra.problem import coupled_residuals
from dextra.saddle import IterateVector


logger = logging.getLogger(__name__)

METHODS = ('auto', 'enumerate', 'cvxpy', 'extragradient')

# Largest worst-case number of active sets visited by the enumeration
DEFAULT_ENUM_CAP = 2**16

_RANK_TOL = 1e-10
_FEAS_TOL = 1e-8
_SIGN_TOL = 1e-8
_ACTIVE_TOL = 1e-7
_MAX_POLISH = 50


class InfeasibleInstanceError(ValueError):
    """ No point satisfies all the constraints of the instance. """


class QuadraticProgram(object):
    """
    Centralized problem in the variable u = (x, xt):
    minimize 0.5 u'Pu + p'u + c0 subject to E u = e, G u <= g,
    lower <= u <= upper.
    """

    def __init__(self, P, p, c0, E, e, G, g, lower, upper, n, nt):
        self.P, self.p, self.c0 = P, p, c0
        self.E, self.e = E, e
        self.G, self.g = G, g
        self.lower, self.upper = lower, upper
        self.n, self.nt = n, nt

    @property
    def size(self):
        return len(self.p)

    def objective(self, u):
        return float(0.5 * u @ (self.P @ u) + self.p @ u + self.c0)

    def gradient(self, u):
        return self.P @ u + self.p


def to_qp(spec):
    """
    Assemble the centralized quadratic program of an instance with quadratic
    objectives.

    :param spec: ProblemSpec
    :return: QuadraticProgram
    """
    if not spec.is_quadratic:
        raise TypeError('A quadratic program requires quadratic objectives')
    n, nt = spec.n, spec.nt
    size = n + nt
    P = np.zeros((size, size))
    p = np.zeros(size)
    c0 = 0.
    for k, agent in enumerate(spec.agents):
        index = np.concatenate([np.arange(spec.offsets[k],
                                          spec.offsets[k+1]),
                                np.arange(n, n + nt)])
        P[np.ix_(index, index)] += agent.objective.Q
        p[index] += agent.objective.q
        c0 += agent.objective.c0
    shared = spec.shared
    E = scipy.linalg.block_diag(spec.stacked_A, shared.Atil)
    G = scipy.linalg.block_diag(spec.stacked_C, shared.Ctil)
    E = E.reshape(spec.m + spec.mt, size)
    G = G.reshape(spec.h + spec.ht, size)
    e = np.concatenate([spec.stacked_b, shared.btil])
    g = np.concatenate([spec.stacked_d, shared.dtil])
    lower = np.concatenate([spec.box.lower, shared.box.lower])
    upper = np.concatenate([spec.box.upper, shared.box.upper])
    return QuadraticProgram(P, p, c0, E, e, G, g, lower, upper, n, nt)


class OracleSolution(object):
    """
    Centralized solution: primal point, minimal-norm multipliers
    y = (lambda; mu) of the coupled constraints and yt of the shared ones,
    objective value and KKT residual.
    """

    def __init__(self, x_star, xt_star, y_star, yt_star, objective,
                 kkt_residual, method, active_set=None):
        self.x_star = np.asarray(x_star, dtype=float)
        self.xt_star = np.asarray(xt_star, dtype=float)
        self.y_star = np.asarray(y_star, dtype=float)
        self.yt_star = np.asarray(yt_star, dtype=float)
        self.objective = float(objective)
        self.kkt_residual = float(kkt_residual)
        self.method = method
        self.active_set = active_set

    def to_dict(self):
        return {'x_star': self.x_star.tolist(),
                'xt_star': self.xt_star.tolist(),
                'y_star': self.y_star.tolist(),
                'yt_star': self.yt_star.tolist(),
                'objective': self.objective,
                'kkt_residual': self.kkt_residual,
                'method': self.method}

    def saddle_point(self, spec):
        """
        Saddle point of the decentralized problem built from the solution:
        every agent holds y*, yt*/l and xt*; the consensus variables z, zt
        balance the local residuals and shared-variable gradients across
        agents (minimum-norm solutions of W z = T).

        :param spec: ProblemSpec
        :return: IterateVector
        """
        l = spec.l
        pinv = np.linalg.pinv(laplacian(spec.graph).base)
        x_blocks = spec.split(self.x_star)
        local = np.array([agent.AC @ xk - agent.bd
                          for agent, xk in zip(spec.agents, x_blocks)])
        local = local.reshape(l, spec.m + spec.h)
        z = pinv @ (-local + local.mean(axis=0))

        yt_share = self.yt_star / l
        shared_grads = []
        for agent, xk in zip(spec.agents, x_blocks):
            _, gxt = agent.objective.grad(xk, self.xt_star)
            shared_grads.append(gxt + spec.shared.AC.T @ yt_share)
        shared_grads = np.array(shared_grads).reshape(l, spec.nt)
        zt = pinv @ (-shared_grads + shared_grads.mean(axis=0))

        return IterateVector.from_components(
            spec, x=self.x_star, xt=np.tile(self.xt_star, l),
            y=np.tile(self.y_star, l), yt=np.tile(yt_share, l),
            z=z.ravel(), zt=zt.ravel())


def solve_centralized(spec, method='auto', enum_cap=DEFAULT_ENUM_CAP,
                      fallback_iters=200000):
    """
    Solve the centralized problem.

    :param spec: ProblemSpec
    :param method: 'enumerate' (exact active-set enumeration), 'cvxpy'
    (conic solve followed by exact active-set polishing), 'extragradient'
    (centralized projected extragradient), or 'auto' to pick the first of
    these that applies
    :param enum_cap: largest worst-case number of active sets enumerated
    :param fallback_iters: iterations of the extragradient method
    :return: OracleSolution
    """
    if method not in METHODS:
        raise ValueError('Unknown method: {}'.format(method))
    if not spec.is_quadratic:
        if method not in ('auto', 'extragradient'):
            raise TypeError('Method {} requires quadratic '
                            'objectives'.format(method))
        return _solve_extragradient(spec, fallback_iters)
    qp = to_qp(spec)
    if method == 'extragradient':
        return _solve_extragradient(spec, fallback_iters)
    _check_feasible(qp)
    if method == 'auto':
        method = ('enumerate' if _candidate_count(qp) <= enum_cap
                  else 'cvxpy')
    logger.info('Solving {} centrally ({}) ...'.format(spec.name, method))
    if method == 'enumerate':
        if _candidate_count(qp) > enum_cap:
            raise ValueError('Too many active sets to enumerate: {} > '
                             '{}'.format(_candidate_count(qp), enum_cap))
        u, active = _enumerate(qp)
    else:
        u, active = _solve_cvxpy(qp)
    solution = _build_solution(spec, qp, u, active, method)
    logger.info('... objective {:.10g}, KKT residual '
                '{:.3e}.'.format(solution.objective, solution.kkt_residual))
    return solution


def _check_feasible(qp):
    result = scipy.optimize.linprog(
        np.zeros(qp.size),
        A_ub=qp.G if len(qp.g) else None, b_ub=qp.g if len(qp.g) else None,
        A_eq=qp.E if len(qp.e) else None, b_eq=qp.e if len(qp.e) else None,
        bounds=list(zip(qp.lower, qp.upper)), method='highs')
    if result.status == 2:
        raise InfeasibleInstanceError('The constraints of the instance are '
                                      'inconsistent: {}'.format(result.message))


def _free_coordinates(qp):
    return [i for i in range(qp.size) if qp.upper[i] > qp.lower[i]]


def _candidate_count(qp):
    return 2**len(qp.g) * 3**len(_free_coordinates(qp))


class ActiveSet(object):
    """
    Constraints held with equality: general inequality rows, and box faces
    as (coordinate, side) with side -1 (lower) or +1 (upper).
    """

    def __init__(self, rows=(), faces=()):
        self.rows = tuple(sorted(rows))
        self.faces = tuple(sorted(faces))

    def to_dict(self):
        return {'rows': list(self.rows),
                'faces': [[int(i), int(s)] for i, s in self.faces]}

    def add_row(self, j):
        return ActiveSet(self.rows + (j,), self.faces)

    def add_face(self, i, side):
        return ActiveSet(self.rows, self.faces + ((i, side),))

    def remove(self, kind, item):
        if kind == 'row':
            return ActiveSet([j for j in self.rows if j != item], self.faces)
        return ActiveSet(self.rows, [f for f in self.faces if f != item])


def _fixed_faces(qp):
    return [(i, -1) for i in range(qp.size) if qp.upper[i] <= qp.lower[i]]


def _solve_kkt(qp, active):
    """
    Stationary point of the program with the active constraints as
    equalities: [[P, B'], [B, 0]] [u; w] = [-p; c], solved by pivoted
    least squares.

    :return: (u, multipliers of E, of the active rows, of the faces) or None
    if the system is inconsistent
    """
    size = qp.size
    faces = list(active.faces) + _fixed_faces(qp)
    face_rows = np.zeros((len(faces), size))
    face_rhs = np.zeros(len(faces))
    for r, (i, side) in enumerate(faces):
        face_rows[r, i] = 1.
        face_rhs[r] = qp.lower[i] if side < 0 else qp.upper[i]
    rows = list(active.rows)
    B = np.vstack([qp.E, qp.G[rows], face_rows]).reshape(-1, size)
    c = np.concatenate([qp.e, qp.g[rows], face_rhs])
    k = B.shape[0]
    kkt = np.block([[qp.P, B.T], [B, np.zeros((k, k))]])
    rhs = np.concatenate([-qp.p, c])
    scale = max(np.max(np.abs(kkt)), 1.)
    sol, _, _, _ = scipy.linalg.lstsq(kkt, rhs, cond=_RANK_TOL,
                                      lapack_driver='gelsy')
    if np.linalg.norm(kkt @ sol - rhs) > _FEAS_TOL * scale * max(
            np.linalg.norm(rhs), 1.):
        return None
    u, w = sol[:size], sol[size:]
    me, mr = len(qp.e), len(rows)
    return u, w[:me], w[me:me+mr], w[me+mr:], faces


def _primal_violation(qp, u):
    """ Most violated inequality row or box face, None if feasible. """
    worst, item = _FEAS_TOL, None
    if len(qp.g):
        slack = qp.G @ u - qp.g
        scale = 1. + np.abs(qp.g)
        j = int(np.argmax(slack / scale))
        if slack[j] / scale[j] > worst:
            worst, item = slack[j] / scale[j], ('row', j)
    for i in range(qp.size):
        for side, excess in ((-1, qp.lower[i] - u[i]),
                             (1, u[i] - qp.upper[i])):
            bound = qp.lower[i] if side < 0 else qp.upper[i]
            excess /= 1. + abs(bound)
            if excess > worst:
                worst, item = excess, ('face', (i, side))
    return item


def _dual_violation(active, w_rows, w_faces):
    """ Most negative multiplier of an active inequality, None if none. """
    worst, item = -_SIGN_TOL, None
    for j, w in zip(active.rows, w_rows):
        if w < worst:
            worst, item = w, ('row', j)
    for face, w in zip(active.faces, w_faces):
        signed = w * face[1]
        if signed < worst:
            worst, item = signed, ('face', face)
    return item


def _check_candidate(qp, active):
    result = _solve_kkt(qp, active)
    if result is None:
        return None
    u, _, w_rows, w_faces, _ = result
    if _primal_violation(qp, u) is not None:
        return None
    if _dual_violation(active, w_rows, w_faces) is not None:
        return None
    return u


def _candidates(qp, size):
    """ Active sets with `size` elements (rows or faces). """
    free = _free_coordinates(qp)
    items = [('row', j) for j in range(len(qp.g))] + \
        [('coord', i) for i in free]
    for combo in itertools.combinations(items, size):
        rows = [j for kind, j in combo if kind == 'row']
        coords = [i for kind, i in combo if kind == 'coord']
        for sides in itertools.product((-1, 1), repeat=len(coords)):
            yield ActiveSet(rows, zip(coords, sides))


def _enumerate(qp):
    """
    Visit active sets by increasing size and keep, at the first size where
    some set yields a KKT point, the best objective (then the
    lexicographically smallest point).
    """
    n_items = len(qp.g) + len(_free_coordinates(qp))
    for size in range(n_items + 1):
        found = []
        for active in _candidates(qp, size):
            u = _check_candidate(qp, active)
            if u is not None:
                found.append((round(qp.objective(u), 9),
                              tuple(np.round(u, 12)),
                              u, active))
        if found:
            best = min(found, key=lambda item: item[:2])
            logger.debug('... KKT point with {} active constraints, {} '
                         'candidates'.format(size, len(found)))
            return best[2], best[3]
    raise InfeasibleInstanceError('No active set yields a KKT point')


def _solve_cvxpy(qp):
    """
    Conic solve with cvxpy, then identification of the active set and
    exact polishing of the KKT point.
    """
    u = cp.Variable(qp.size)
    objective = 0.5 * cp.quad_form(u, cp.psd_wrap(qp.P)) + qp.p @ u
    constraints = [u >= qp.lower, u <= qp.upper]
    if len(qp.e):
        constraints.append(qp.E @ u == qp.e)
    if len(qp.g):
        constraints.append(qp.G @ u <= qp.g)
    problem = cp.Problem(cp.Minimize(objective), constraints)
    solver = cp.CLARABEL if cp.CLARABEL in cp.installed_solvers() else None
    problem.solve(solver=solver)
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleInstanceError('The conic solver reports an '
                                      'infeasible instance')
    if u.value is None:
        raise RuntimeError('The conic solver failed: '
                           '{}'.format(problem.status))
    point = np.clip(u.value, qp.lower, qp.upper)

    rows, faces = [], []
    if len(qp.g):
        slack = qp.g - qp.G @ point
        rows = [j for j in range(len(qp.g))
                if slack[j] <= _ACTIVE_TOL * (1. + abs(qp.g[j]))]
    for i in _free_coordinates(qp):
        if point[i] - qp.lower[i] <= _ACTIVE_TOL * (1. + abs(qp.lower[i])):
            faces.append((i, -1))
        elif qp.upper[i] - point[i] <= _ACTIVE_TOL * (1. + abs(qp.upper[i])):
            faces.append((i, 1))
    active = ActiveSet(rows, faces)
    for _ in range(_MAX_POLISH):
        result = _solve_kkt(qp, active)
        if result is None:
            # degenerate guess: drop the last face or row and retry
            if active.faces:
                active = active.remove('face', active.faces[-1])
            elif active.rows:
                active = active.remove('row', active.rows[-1])
            else:
                break
            continue
        u_kkt, _, w_rows, w_faces, _ = result
        violation = _primal_violation(qp, u_kkt)
        if violation is not None:
            kind, item = violation
            active = (active.add_row(item) if kind == 'row'
                      else active.add_face(*item))
            continue
        violation = _dual_violation(active, w_rows, w_faces)
        if violation is not None:
            active = active.remove(*violation)
            continue
        return u_kkt, active
    logger.warning('Active-set polishing did not converge, keeping the conic '
                   'solution')
    return point, ActiveSet(rows, faces)


def _multipliers(qp, u, active):
    """
    Minimal-norm multipliers of the stationarity system at u; the active
    set's own multipliers are kept if the minimal-norm ones have the wrong
    signs.
    """
    faces = list(active.faces) + _fixed_faces(qp)
    face_rows = np.zeros((len(faces), qp.size))
    for r, (i, _) in enumerate(faces):
        face_rows[r, i] = 1.
    rows = list(active.rows)
    B = np.vstack([qp.E, qp.G[rows], face_rows]).reshape(-1, qp.size)
    me, mr = len(qp.e), len(rows)
    w, _, _, _ = scipy.linalg.lstsq(B.T, -qp.gradient(u),
                                    lapack_driver='gelsd')
    valid = _dual_violation(active, w[me:me+mr],
                            w[me+mr:me+mr+len(active.faces)]) is None
    if not valid:
        result = _solve_kkt(qp, active)
        if result is not None:
            _, w_eq, w_rows, w_faces, _ = result
            w = np.concatenate([w_eq, w_rows, w_faces])
    lam = w[:me]
    mu = np.zeros(len(qp.g))
    mu[rows] = w[me:me+mr]
    return lam, mu


def _build_solution(spec, qp, u, active, method):
    lam, mu = _multipliers(qp, u, active)
    x, xt = u[:qp.n], u[qp.n:]
    y = np.concatenate([lam[:spec.m], mu[:spec.h]])
    yt = np.concatenate([lam[spec.m:], mu[spec.h:]])
    return OracleSolution(x, xt, y, yt, qp.objective(u),
                          kkt_residual(spec, x, xt, y, yt), method,
                          active.to_dict())


def _centralized_gradient(spec, x, xt):
    gx, gxt = [], np.zeros(spec.nt)
    for agent, xk in zip(spec.agents, spec.split(x)):
        g1, g2 = agent.objective.grad(xk, xt)
        gx.append(g1)
        gxt = gxt + g2
    return np.concatenate(gx), gxt


def _solve_extragradient(spec, n_iters):
    """
    Projected extragradient on the centralized Lagrangian
    f(u) + lambda'(E u - e) + mu'(G u - g) (no consensus variables).
    """
    logger.info('Solving {} centrally (extragradient, {} iterations) '
                '...'.format(spec.name, n_iters))
    n, nt = spec.n, spec.nt
    shared = spec.shared
    E = scipy.linalg.block_diag(spec.stacked_A, shared.Atil)
    G = scipy.linalg.block_diag(spec.stacked_C, shared.Ctil)
    E = E.reshape(spec.m + spec.mt, n + nt)
    G = G.reshape(spec.h + spec.ht, n + nt)
    e = np.concatenate([spec.stacked_b, shared.btil])
    g = np.concatenate([spec.stacked_d, shared.dtil])
    me, mi = len(e), len(g)
    lower = np.concatenate([spec.box.lower, shared.box.lower,
                            np.full(me, -np.inf), np.zeros(mi)])
    upper = np.concatenate([spec.box.upper, shared.box.upper,
                            np.full(me + mi, np.inf)])
    size = n + nt

    def operator(v):
        u, lam, mu = v[:size], v[size:size+me], v[size+me:]
        gx, gxt = _centralized_gradient(spec, u[:n], u[n:])
        return np.concatenate([np.concatenate([gx, gxt]) + E.T @ lam
                               + G.T @ mu,
                               -(E @ u - e), -(G @ u - g)])

    coupling = np.vstack([E, G])
    sigma = scipy.linalg.svdvals(coupling)[0] if coupling.size else 0.
    lipschitz = sum(a.lipschitz for a in spec.agents) + sigma
    h = 1. / lipschitz if lipschitz > 0. else 1.
    v = np.clip(np.concatenate([0.5 * (lower[:size] + upper[:size]),
                                np.zeros(me + mi)]), lower, upper)
    total = np.zeros_like(v)
    for _ in range(n_iters):
        half = np.clip(v - h * operator(v), lower, upper)
        v = np.clip(v - h * operator(half), lower, upper)
        total += half
    candidates = [v]
    if n_iters > 0:
        candidates.append(total / n_iters)

    best = None
    for candidate in candidates:
        u, lam, mu = candidate[:size], candidate[size:size+me], \
            candidate[size+me:]
        x, xt = u[:n], u[n:]
        y = np.concatenate([lam[:spec.m], mu[:spec.h]])
        yt = np.concatenate([lam[spec.m:], mu[spec.h:]])
        residual = kkt_residual(spec, x, xt, y, yt)
        if best is None or residual < best[-1]:
            objective = sum(a.objective.eval(xk, xt)
                            for a, xk in zip(spec.agents, spec.split(x)))
            best = (x, xt, y, yt, objective, residual)
    logger.info('... KKT residual {:.3e}.'.format(best[-1]))
    return OracleSolution(*best, method='extragradient')


def kkt_residual(spec, x, xt, y, yt, tol=1e-8):
    """
    Sum of the stationarity residual projected on the tangent cone of the
    boxes, the constraint violations and the complementarity violations.

    :param spec: ProblemSpec
    :param x: stacked private vector
    :param xt: shared vector
    :param y: coupled multipliers (lambda; mu)
    :param yt: shared multipliers (lambda_t; mu_t)
    :param tol: distance under which a coordinate is on its bound
    """
    x, xt = np.asarray(x, dtype=float), np.asarray(xt, dtype=float)
    y, yt = np.asarray(y, dtype=float), np.asarray(yt, dtype=float)
    shared = spec.shared
    gx, gxt = _centralized_gradient(spec, x, xt)
    coupled = np.vstack([spec.stacked_A, spec.stacked_C])
    coupled = coupled.reshape(spec.m + spec.h, spec.n)
    grad = np.concatenate([gx + coupled.T @ y, gxt + shared.AC.T @ yt])

    u = np.concatenate([x, xt])
    lower = np.concatenate([spec.box.lower, shared.box.lower])
    upper = np.concatenate([spec.box.upper, shared.box.upper])
    at_lower = u <= lower + tol * (1. + np.abs(lower))
    at_upper = u >= upper - tol * (1. + np.abs(upper))
    projected = grad.copy()
    projected[at_lower] = np.minimum(grad[at_lower], 0.)
    projected[at_upper] = np.maximum(grad[at_upper], 0.)
    projected[at_lower & at_upper] = 0.
    stationarity = np.linalg.norm(projected)

    eq, ineq, sheq, shineq = coupled_residuals(spec, x, xt)
    box = np.maximum(lower - u, 0.) + np.maximum(u - upper, 0.)
    feasibility = (np.linalg.norm(eq) + np.linalg.norm(np.maximum(ineq, 0.))
                   + np.linalg.norm(sheq)
                   + np.linalg.norm(np.maximum(shineq, 0.))
                   + np.linalg.norm(box))

    mu, mut = y[spec.m:], yt[spec.mt:]
    complementarity = (np.linalg.norm(mu * ineq) + np.linalg.norm(mut * shineq)
                       + np.linalg.norm(np.minimum(mu, 0.))
                       + np.linalg.norm(np.minimum(mut, 0.)))
    return float(stationarity + feasibility + complementarity)
