import logging

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from dextra.graph import laplacian, lifted_matvec, matrix_stats
from dextra.problem import DimensionError, QuadraticObjective


logger = logging.getLogger(__name__)

COMPONENTS = ('x', 'xt', 'y', 'yt', 'z', 'zt')

# Radius used for a dual block whose constraint matrix is identically zero
DEFAULT_DUAL_CAP = 1e6

# Above this size the largest singular value of the coupling is computed
# iteratively
_DENSE_SVD_LIMIT = 2000

_RESIDUAL_FACTOR = 17. * np.sqrt(2.)


class IterateLayout(object):
    """
    Positions of the six components of the stacked state
    zeta = (x, xt, y, yt, z, zt) in a flat vector. All components but x
    consist of l equal-size blocks, one per agent.

    :param spec: ProblemSpec
    """

    def __init__(self, spec):
        self.l = spec.l
        self.dims = list(spec.dims)
        self.x_offsets = spec.offsets
        self.block_dims = {'xt': spec.nt,
                           'y': spec.m + spec.h,
                           'yt': spec.mt + spec.ht,
                           'z': spec.m + spec.h,
                           'zt': spec.nt}
        self.m, self.h = spec.m, spec.h
        self.mt, self.ht = spec.mt, spec.ht
        sizes = {'x': spec.n}
        sizes.update({name: self.l * d for name, d in self.block_dims.items()})
        self.sizes = sizes
        self.slices = {}
        offset = 0
        for name in COMPONENTS:
            self.slices[name] = slice(offset, offset + sizes[name])
            offset += sizes[name]
        self.size = offset

    def __eq__(self, other):
        return (isinstance(other, IterateLayout)
                and self.dims == other.dims
                and self.block_dims == other.block_dims
                and (self.m, self.h) == (other.m, other.h))

    def blocks(self, name, values):
        """ Split the values of one component into its agent blocks. """
        if name == 'x':
            return [values[self.x_offsets[k]:self.x_offsets[k+1]]
                    for k in range(self.l)]
        d = self.block_dims[name]
        return [values[k*d:(k+1)*d] for k in range(self.l)]


class IterateVector(object):
    """
    Stacked state zeta = (x, xt, y, yt, z, zt) of all agents, stored as one
    flat vector; components are exposed as views.

    :param layout: IterateLayout
    :param data: flat vector of length layout.size
    """

    def __init__(self, layout, data):
        data = np.asarray(data, dtype=float)
        if data.shape != (layout.size,):
            raise DimensionError('Stacked state of length {} expected, got '
                                 'shape {}'.format(layout.size, data.shape))
        self.layout = layout
        self.data = data

    @classmethod
    def zeros(cls, spec):
        layout = IterateLayout(spec)
        return cls(layout, np.zeros(layout.size))

    @classmethod
    def from_flat(cls, spec, v):
        return cls(IterateLayout(spec), np.array(v, dtype=float))

    @classmethod
    def from_components(cls, spec, **components):
        """
        Build a state from stacked components; missing components are zero.
        """
        zeta = cls.zeros(spec)
        for name, values in components.items():
            if name not in COMPONENTS:
                raise ValueError('Unknown component: {}'.format(name))
            target = zeta.data[zeta.layout.slices[name]]
            values = np.asarray(values, dtype=float).ravel()
            if values.shape != target.shape:
                raise DimensionError('Component {} of length {} expected, got '
                                     '{}'.format(name, len(target),
                                                 len(values)))
            target[:] = values
        return zeta

    def __getattr__(self, name):
        if name in COMPONENTS:
            return self.data[self.layout.slices[name]]
        raise AttributeError(name)

    def blocks(self, name):
        return self.layout.blocks(name, getattr(self, name))

    def xt_mean(self):
        """ Average of the agents' copies of the shared variable. """
        d = self.layout.block_dims['xt']
        return self.xt.reshape(self.layout.l, d).mean(axis=0)

    def flat(self):
        return self.data.copy()

    def copy(self):
        return IterateVector(self.layout, self.data.copy())

    def axpy(self, alpha, other):
        """ New state self + alpha * other. """
        return IterateVector(self.layout, self.data + alpha * other.data)

    def __sub__(self, other):
        return IterateVector(self.layout, self.data - other.data)

    def __repr__(self):
        return 'IterateVector({})'.format(
            ', '.join('{}={}'.format(n, getattr(self, n).tolist())
                      for n in COMPONENTS))


def projection_bounds(spec):
    """
    Lower and upper bounds of the stacked state: boxes for x and for every
    copy of xt, non-negativity for the inequality multipliers, no bounds for
    equality multipliers and consensus variables.
    """
    layout = IterateLayout(spec)
    lower = np.full(layout.size, -np.inf)
    upper = np.full(layout.size, np.inf)
    lower[layout.slices['x']] = spec.box.lower
    upper[layout.slices['x']] = spec.box.upper
    lower[layout.slices['xt']] = np.tile(spec.shared.box.lower, spec.l)
    upper[layout.slices['xt']] = np.tile(spec.shared.box.upper, spec.l)
    y_lower = np.concatenate([np.full(spec.m, -np.inf), np.zeros(spec.h)])
    lower[layout.slices['y']] = np.tile(y_lower, spec.l)
    yt_lower = np.concatenate([np.full(spec.mt, -np.inf), np.zeros(spec.ht)])
    lower[layout.slices['yt']] = np.tile(yt_lower, spec.l)
    return lower, upper


class SaddlePointProblem(object):
    """
    Consensus saddle-point problem of an instance: minimize over
    (x, xt, z) and maximize over (y, yt, zt) the function
    G_w = sum_k g^k(x^k, xt^k, y^k, yt^k) + z'Wy + zt'Wt xt.

    Local terms are evaluated for all agents at once with block-diagonal
    matrices; products with W and Wt go through `lifted_matvec`, the only
    operation mixing blocks of different agents.

    :param spec: ProblemSpec
    :param W: CommunicationMatrix with block size m+h (defaults to the
    Laplacian of the graph)
    :param Wt: CommunicationMatrix with block size nt (defaults to the
    Laplacian of the graph)
    """

    def __init__(self, spec, W=None, Wt=None):
        self.spec = spec
        self.layout = IterateLayout(spec)
        ny, nt = spec.m + spec.h, spec.nt
        if W is None or Wt is None:
            base = laplacian(spec.graph)
            W = W if W is not None else base.lift(ny)
            Wt = Wt if Wt is not None else base.lift(nt)
        for matrix, d, name in ((W, ny, 'W'), (Wt, nt, 'Wt')):
            if matrix.block_dim != d or matrix.graph.node_count != spec.l:
                raise DimensionError('{} should act on {} blocks of size {}, '
                                     'got {} blocks of size '
                                     '{}'.format(name, spec.l, d,
                                                 matrix.graph.node_count,
                                                 matrix.block_dim))
        self.W = W
        self.Wt = Wt

        self._ac = scipy.sparse.csr_matrix(
            scipy.linalg.block_diag(*[a.AC for a in spec.agents]))
        self._ac_t = self._ac.T.tocsr()
        self._bd = np.concatenate([a.bd for a in spec.agents])
        self._st = np.asarray(spec.shared.AC)
        self._sbd = np.asarray(spec.shared.bd)
        self.lower, self.upper = projection_bounds(spec)

        self._hessian = None
        if spec.is_quadratic:
            self._assemble_quadratic()

    def _assemble_quadratic(self):
        spec = self.spec
        n, nt = spec.n, spec.nt
        rows, cols, data = [], [], []
        linear = np.zeros(n + spec.l * nt)
        constant = 0.
        for k, agent in enumerate(spec.agents):
            index = np.concatenate([
                np.arange(spec.offsets[k], spec.offsets[k+1]),
                np.arange(n + k * nt, n + (k + 1) * nt)])
            rows.append(np.repeat(index, len(index)))
            cols.append(np.tile(index, len(index)))
            data.append(agent.objective.Q.ravel())
            linear[index] = agent.objective.q
            constant += agent.objective.c0
        size = n + spec.l * nt
        self._hessian = scipy.sparse.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows),
                                    np.concatenate(cols))),
            shape=(size, size))
        self._linear = linear
        self._constant = constant

    def _split(self, v):
        s = self.layout.slices
        return (v[s['x']], v[s['xt']], v[s['y']], v[s['yt']], v[s['z']],
                v[s['zt']])

    def gradients(self, x, xt):
        """
        Gradients of the local objectives: (d f^k / d x^k)_k stacked and
        (d f^k / d xt^k)_k stacked.
        """
        if self._hessian is not None:
            g = self._hessian @ np.concatenate([x, xt]) + self._linear
            return g[:len(x)], g[len(x):]
        gx, gxt = [], []
        for agent, xk, xtk in zip(self.spec.agents,
                                  self.layout.blocks('x', x),
                                  self.layout.blocks('xt', xt)):
            g1, g2 = agent.objective.grad(xk, xtk)
            gx.append(g1)
            gxt.append(g2)
        return np.concatenate(gx), np.concatenate(gxt)

    def local_objective(self, x, xt):
        """ sum_k f^k(x^k, xt^k) with each agent using its own copy. """
        if self._hessian is not None:
            u = np.concatenate([x, xt])
            return float(0.5 * u @ (self._hessian @ u) + self._linear @ u
                         + self._constant)
        return float(sum(agent.objective.eval(xk, xtk)
                         for agent, xk, xtk in zip(
                             self.spec.agents,
                             self.layout.blocks('x', x),
                             self.layout.blocks('xt', xt))))

    def local_residuals(self, x, xt):
        """ Per-agent residuals (A^k x^k - b^k; C^k x^k - d^k), stacked. """
        return self._ac @ x - self._bd

    def shared_residuals(self, xt):
        """ Per-copy residuals (Atil xt^k - btil; Ctil xt^k - dtil), stacked. """
        l, nt = self.spec.l, self.spec.nt
        return (xt.reshape(l, nt) @ self._st.T - self._sbd).ravel()

    def operator(self, zeta):
        """
        Monotone operator F of the saddle problem, signed so that both the
        minimization and the maximization blocks move along zeta - h F(zeta).

        :param zeta: IterateVector
        """
        return IterateVector(self.layout, self.operator_flat(zeta.data))

    def operator_flat(self, v):
        x, xt, y, yt, z, zt = self._split(v)
        l = self.spec.l
        gx, gxt = self.gradients(x, xt)
        # communication round
        w_z = lifted_matvec(self.W, z)
        w_y = lifted_matvec(self.W, y)
        wt_zt = lifted_matvec(self.Wt, zt)
        wt_xt = lifted_matvec(self.Wt, xt)

        s = self.layout.slices
        out = np.empty_like(v)
        out[s['x']] = gx + self._ac_t @ y
        yt_blocks = yt.reshape(l, self.layout.block_dims['yt'])
        out[s['xt']] = gxt + (yt_blocks @ self._st).ravel() + wt_zt
        out[s['y']] = -(self.local_residuals(x, xt) + w_z)
        out[s['yt']] = -self.shared_residuals(xt)
        out[s['z']] = w_y
        out[s['zt']] = -wt_xt
        return out

    def project(self, zeta):
        return IterateVector(self.layout, self.project_flat(zeta.data))

    def project_flat(self, v):
        return np.clip(v, self.lower, self.upper)

    def lagrangian(self, zeta):
        """ Value of G_w at zeta. """
        x, xt, y, yt, z, zt = self._split(zeta.data)
        value = self.local_objective(x, xt)
        value += y @ self.local_residuals(x, xt)
        value += yt @ self.shared_residuals(xt)
        value += z @ lifted_matvec(self.W, y)
        value += zt @ lifted_matvec(self.Wt, xt)
        return float(value)

    def coupling_matrix(self):
        """
        Assembled linear part J of F (everything but the objective
        gradients), as a sparse matrix acting on the flat state.
        """
        layout = self.layout
        w = scipy.sparse.coo_matrix(self.W.dense_lift())
        wt = scipy.sparse.coo_matrix(self.Wt.dense_lift())
        st = scipy.sparse.coo_matrix(
            scipy.linalg.block_diag(*[self._st] * self.spec.l))
        ac = self._ac.tocoo()
        blocks = [('x', 'y', ac.T), ('xt', 'yt', st.T), ('xt', 'zt', wt),
                  ('y', 'x', -ac), ('y', 'z', -w), ('yt', 'xt', -st),
                  ('z', 'y', w), ('zt', 'xt', -wt)]
        rows, cols, data = [], [], []
        for row_name, col_name, block in blocks:
            block = block.tocoo()
            rows.append(block.row + layout.slices[row_name].start)
            cols.append(block.col + layout.slices[col_name].start)
            data.append(block.data)
        return scipy.sparse.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows),
                                    np.concatenate(cols))),
            shape=(layout.size, layout.size))


def local_lagrangian(spec, k, xk, xtk, yk, ytk):
    """
    Local term g^k = f^k(x^k, xt^k) + y^k'(A^k x^k - b^k; C^k x^k - d^k)
    + yt^k'(Atil xt^k - btil; Ctil xt^k - dtil).
    """
    agent, shared = spec.agents[k], spec.shared
    expected = (('x^k', xk, agent.dim), ('xt^k', xtk, spec.nt),
                ('y^k', yk, spec.m + spec.h), ('yt^k', ytk, spec.mt + spec.ht))
    for name, value, size in expected:
        if np.shape(value) != (size,):
            raise DimensionError('{} of length {} expected for agent {}, got '
                                 'shape {}'.format(name, size, k,
                                                   np.shape(value)))
    xk, xtk, yk, ytk = (np.asarray(v, dtype=float)
                        for v in (xk, xtk, yk, ytk))
    value = agent.objective.eval(xk, xtk)
    value += yk @ (agent.AC @ xk - agent.bd)
    value += ytk @ (shared.AC @ xtk - shared.bd)
    return float(value)


def operator_eval(spec, W, Wt, zeta):
    """ Monotone operator F(zeta) of the saddle problem. """
    return SaddlePointProblem(spec, W, Wt).operator(zeta)


def project(spec, zeta):
    """ Projection of the stacked state onto the feasible sets. """
    lower, upper = projection_bounds(spec)
    return IterateVector(zeta.layout, np.clip(zeta.data, lower, upper))


def lagrangian_value(spec, W, Wt, zeta):
    return SaddlePointProblem(spec, W, Wt).lagrangian(zeta)


def euclidean_lipschitz(spec, W=None, Wt=None):
    """
    Lipschitz constant of F in the Euclidean norm, bounded by
    max_k L_k + sigma_max(J) with J the linear part of F.
    """
    problem = SaddlePointProblem(spec, W, Wt)
    coupling = problem.coupling_matrix()
    if coupling.nnz == 0:
        sigma = 0.
    elif min(coupling.shape) <= _DENSE_SVD_LIMIT:
        sigma = scipy.linalg.svdvals(coupling.toarray())[0]
    else:
        sigma = scipy.sparse.linalg.svds(coupling, k=1,
                                         return_singular_vectors=False)[0]
    lxx = max(a.lipschitz for a in spec.agents)
    return float(lxx + sigma)


class ProblemConstants(object):
    """
    Radii, norms and Lipschitz constants of the saddle problem, together
    with the composite constant L_zeta and the step size 1/L_zeta.
    """
    FIELDS = ('R_x', 'R_xt_primal', 'R_y', 'R_yt', 'R_z', 'R_zt', 'M_y',
              'M_xt', 'L_xx', 'L_xy', 'L_yx', 'L_yy', 'L_zeta', 'step_size',
              'R_xxt', 'R_yyt', 'lambda_max', 'lambda_min_pos', 'kappa',
              'grad_x_max', 'grad_xt_max', 'sigma_min_pos_local',
              'sigma_min_pos_shared')

    def __init__(self, **values):
        missing = set(self.FIELDS) - set(values)
        if missing:
            raise ValueError('Missing constants: '
                             '{}'.format(', '.join(sorted(missing))))
        for name in self.FIELDS:
            setattr(self, name, float(values[name]))
        self.capped = tuple(values.get('capped', ()))

    def radii(self):
        return {'x': self.R_x, 'xt': self.R_xt_primal, 'y': self.R_y,
                'yt': self.R_yt, 'z': self.R_z, 'zt': self.R_zt}

    def to_dict(self):
        record = {name: getattr(self, name) for name in self.FIELDS}
        record['capped'] = list(self.capped)
        return record

    def __repr__(self):
        return 'ProblemConstants({})'.format(
            ', '.join('{}={:.6g}'.format(n, getattr(self, n))
                      for n in self.FIELDS))


def _stats_or_none(a):
    if a.size == 0 or not np.any(a):
        return None
    return matrix_stats(a)


def compute_constants(spec, W=None, dual_cap=DEFAULT_DUAL_CAP):
    """
    Constants of the saddle problem used for the step size and the
    convergence bounds.

    :param spec: ProblemSpec with finite boxes
    :param W: (optional) CommunicationMatrix; defaults to the Laplacian
    :param dual_cap: radius used for a dual block whose constraint matrix is
    identically zero
    """
    l = spec.l
    comm = W if W is not None else laplacian(spec.graph)
    spectrum = comm.spectral()
    lambda_max, lambda_min_pos = (spectrum['lambda_max'],
                                  spectrum['lambda_min_pos'])
    capped = []

    grad_x_sq, grad_xt = 0., 0.
    for k, agent in enumerate(spec.agents):
        gx, gxt = agent.objective.max_grad_norm(spec.agent_box(k), agent.dim)
        grad_x_sq += gx**2
        grad_xt += gxt
    grad_x = np.sqrt(grad_x_sq)

    ny, nyt = spec.m + spec.h, spec.mt + spec.ht
    local_stats = [_stats_or_none(a.AC) for a in spec.agents]
    sigma_max_local = max([s['sigma_max'] for s in local_stats if s] or [0.])
    sigma_min_pos_local = min([s['sigma_min_pos'] for s in local_stats if s]
                              or [np.nan])

    if ny == 0:
        R_y = 0.
    else:
        stats = _stats_or_none(np.vstack([spec.stacked_A, spec.stacked_C]))
        if stats is None:
            logger.warning('Coupled constraint matrices are zero, dual radius '
                           'capped at {}'.format(dual_cap))
            capped.append('R_y')
            R_y = dual_cap
        else:
            R_y = np.sqrt(l) * grad_x / stats['sigma_min_pos']

    shared_stats = _stats_or_none(spec.shared.AC)
    if nyt == 0:
        R_yt = 0.
    elif shared_stats is None:
        logger.warning('Shared constraint matrices are zero, dual radius '
                       'capped at {}'.format(dual_cap))
        capped.append('R_yt')
        R_yt = dual_cap
    else:
        R_yt = np.sqrt(l) * grad_xt / shared_stats['sigma_min_pos']
    sigma_max_shared = shared_stats['sigma_max'] if shared_stats else 0.
    sigma_min_pos_shared = (shared_stats['sigma_min_pos'] if shared_stats
                            else np.nan)

    if ny == 0:
        M_y = 0.
    else:
        M_y = max((s['sigma_max'] if s else 0.) * a.box.max_norm()
                  + np.linalg.norm(a.bd)
                  for a, s in zip(spec.agents, local_stats))
    M_xt = shared_stats['chi'] * grad_xt if shared_stats else grad_xt

    R_z = np.sqrt(2 * l) * M_y / lambda_min_pos if ny > 0 else 0.
    R_zt = np.sqrt(2 * l) * M_xt / lambda_min_pos if spec.nt > 0 else 0.

    R_x = max(a.box.diameter() for a in spec.agents)
    R_xt_primal = spec.shared.box.diameter() if spec.nt > 0 else 0.

    L_xx = max(a.lipschitz for a in spec.agents)
    L_xy = max(sigma_max_local, sigma_max_shared)
    L_yy = 0.
    kappa = lambda_max / lambda_min_pos

    R_xxt = np.sqrt(R_x**2 + R_xt_primal**2)
    R_yyt = np.sqrt(R_y**2 + R_yt**2)
    L_zeta = 2. * max(R_xxt**2 * L_xx,
                      R_yyt**2 * L_yy,
                      np.sqrt(2.) * R_xxt * R_yyt * L_xy
                      + 2. * M_xt * R_xxt * kappa
                      + 2. * M_y * R_yyt * kappa)
    step_size = 1. / L_zeta if L_zeta > 0. else np.inf

    return ProblemConstants(R_x=R_x, R_xt_primal=R_xt_primal, R_y=R_y,
                            R_yt=R_yt, R_z=R_z, R_zt=R_zt, M_y=M_y, M_xt=M_xt,
                            L_xx=L_xx, L_xy=L_xy, L_yx=L_xy, L_yy=L_yy,
                            L_zeta=L_zeta, step_size=step_size, R_xxt=R_xxt,
                            R_yyt=R_yyt, lambda_max=lambda_max,
                            lambda_min_pos=lambda_min_pos, kappa=kappa,
                            grad_x_max=grad_x, grad_xt_max=grad_xt,
                            sigma_min_pos_local=sigma_min_pos_local,
                            sigma_min_pos_shared=sigma_min_pos_shared,
                            capped=capped)


def weighted_norm(constants, zeta):
    """
    Norm of a stacked state with every component scaled by its radius.
    Empty components are left out.

    :param constants: ProblemConstants
    :param zeta: IterateVector
    """
    total = 0.
    for name, radius in constants.radii().items():
        values = getattr(zeta, name)
        if values.size == 0:
            continue
        if radius <= 0.:
            raise ValueError('Zero radius for component {}'.format(name))
        total += float(values @ values) / radius**2
    return float(np.sqrt(total))


def function_residual_bound(constants, n_iters):
    return 3. * constants.L_zeta / n_iters if n_iters > 0 else np.inf


def gap_bound(constants, zeta, zeta0, n_iters):
    """ L_zeta |zeta - zeta0|^2 / (2N) in the weighted norm. """
    if n_iters == 0:
        return np.inf
    return constants.L_zeta * weighted_norm(constants, zeta - zeta0)**2 \
        / (2. * n_iters)


def residual_bounds(constants, n_iters):
    """
    Bounds on the constraint and consensus residuals after N iterations,
    both with the spectral quantities multiplying the rate ('multiplied') and
    dividing it ('divided').
    """
    if n_iters == 0:
        rate = np.inf
    else:
        rate = _RESIDUAL_FACTOR * constants.L_zeta / n_iters
    scales = {'coupled': (rate, constants.sigma_min_pos_local),
              'shared': (rate, constants.sigma_min_pos_shared),
              'consensus_dual': (rate / 2., constants.lambda_min_pos),
              'consensus_primal': (rate / 2., constants.lambda_min_pos)}
    bounds = {}
    for name, (value, scale) in scales.items():
        bounds[name + '_multiplied'] = float(value * scale)
        bounds[name + '_divided'] = float(value / scale)
    return bounds
