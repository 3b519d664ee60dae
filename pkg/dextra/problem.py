import logging
from functools import cached_property

import numpy as np
import scipy.linalg

from dextra.graph import Graph


logger = logging.getLogger(__name__)

# Largest number of box corners visited to maximize a gradient norm exactly
MAX_CORNERS = 2**20
_CORNER_CHUNK = 2**14


class InvalidInstanceError(ValueError):
    """ The instance fails validation or cannot be parsed. """


class DimensionError(ValueError):
    """ Vector or matrix sizes do not match the problem. """


def _as_vector(v):
    arr = np.array(v, dtype=float).ravel()
    arr.setflags(write=False)
    return arr


def _as_matrix(a, n_cols):
    arr = np.array(a, dtype=float)
    if arr.size == 0:
        arr = np.zeros((0, n_cols))
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    arr.setflags(write=False)
    return arr


class BoxSet(object):
    """
    Per-coordinate bounds lower <= x <= upper.

    :param lower: lower bounds
    :param upper: upper bounds
    """

    def __init__(self, lower, upper):
        self.lower = _as_vector(lower)
        self.upper = _as_vector(upper)

    @classmethod
    def empty(cls):
        return cls([], [])

    @classmethod
    def from_dict(cls, record):
        return cls(record['lower'], record['upper'])

    def to_dict(self):
        return {'lower': self.lower.tolist(), 'upper': self.upper.tolist()}

    @property
    def dim(self):
        return len(self.lower)

    def check(self, name='box'):
        violations = []
        if len(self.lower) != len(self.upper):
            violations.append('{}: lower and upper bounds have different '
                              'lengths ({} != {})'.format(name,
                                                          len(self.lower),
                                                          len(self.upper)))
            return violations
        if not (np.all(np.isfinite(self.lower))
                and np.all(np.isfinite(self.upper))):
            violations.append('{}: bounds should be finite'.format(name))
        elif np.any(self.lower > self.upper):
            violations.append('{}: lower bound exceeds upper '
                              'bound'.format(name))
        return violations

    def midpoint(self):
        return 0.5 * (self.lower + self.upper)

    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def max_norm(self):
        """ Largest Euclidean norm of a point of the box. """
        return float(np.linalg.norm(np.maximum(np.abs(self.lower),
                                               np.abs(self.upper))))

    def clip(self, v):
        return np.clip(v, self.lower, self.upper)

    def contains(self, v, tol=0.):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol)
                    and np.all(v <= self.upper + tol))

    def sample(self, rng):
        return rng.uniform(self.lower, self.upper)


class ObjectiveFn(object):
    """
    Smooth convex objective f(x, xt) of an agent, given as a callable pair.

    :param eval: callable (x, xt) -> float
    :param grad: callable (x, xt) -> (gradient wrt x, gradient wrt xt)
    :param lipschitz: Lipschitz constant of the gradient
    :param grad_bound: (optional) bound on the gradient norm over the box
    """
    kind = 'callable'

    def __init__(self, eval, grad, lipschitz=None, grad_bound=None):
        self._eval = eval
        self._grad = grad
        self._lipschitz = lipschitz
        self.grad_bound = grad_bound

    def eval(self, x, xt):
        return float(self._eval(x, xt))

    def grad(self, x, xt):
        gx, gxt = self._grad(x, xt)
        return (np.asarray(gx, dtype=float).ravel(),
                np.asarray(gxt, dtype=float).ravel())

    def lipschitz(self):
        return self._lipschitz

    def max_grad_norm(self, box, n_private):
        """
        Bound on the norms of the two gradient parts over a box of the
        stacked variable (x, xt).

        :param box: BoxSet of the stacked variable
        :param n_private: length of the private part x
        """
        if self.grad_bound is not None:
            return float(self.grad_bound), float(self.grad_bound)
        mid = box.midpoint()
        gx, gxt = self.grad(mid[:n_private], mid[n_private:])
        lipschitz = self.lipschitz() or 0.
        radius = 0.5 * box.diameter()
        return (float(np.linalg.norm(gx) + lipschitz * radius),
                float(np.linalg.norm(gxt) + lipschitz * radius))


class QuadraticObjective(ObjectiveFn):
    """
    Convex quadratic 0.5 u'Qu + q'u + c0 of the stacked variable u = (x, xt).

    :param Q: symmetric positive semidefinite matrix
    :param q: linear term
    :param c0: constant term
    """
    kind = 'quadratic'

    def __init__(self, Q, q, c0=0.):
        q = _as_vector(q)
        self.Q = _as_matrix(Q, len(q))
        self.q = q
        self.c0 = float(c0)
        self.grad_bound = None

    @classmethod
    def from_dict(cls, record):
        if record.get('kind', 'quadratic') != 'quadratic':
            raise InvalidInstanceError('Unknown objective kind: '
                                       '{}'.format(record['kind']))
        return cls(record['Q'], record['q'], record.get('c0', 0.))

    def to_dict(self):
        return {'kind': self.kind, 'Q': self.Q.tolist(), 'q': self.q.tolist(),
                'c0': self.c0}

    @property
    def dim(self):
        return len(self.q)

    def check(self, dim, name='objective'):
        violations = []
        if self.Q.shape != (dim, dim) or len(self.q) != dim:
            violations.append('{}: quadratic of size {} expected, got Q {} '
                              'and q of length {}'.format(name, dim,
                                                          self.Q.shape,
                                                          len(self.q)))
            return violations
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            violations.append('{}: Q is not symmetric'.format(name))
        elif dim > 0:
            eigvals = scipy.linalg.eigvalsh(self.Q)
            if eigvals[0] < -1e-9 * max(1., abs(eigvals[-1])):
                violations.append('{}: Q is not positive '
                                  'semidefinite'.format(name))
        return violations

    def eval(self, x, xt):
        u = np.concatenate([x, xt])
        return float(0.5 * u @ (self.Q @ u) + self.q @ u + self.c0)

    def grad(self, x, xt):
        u = np.concatenate([x, xt])
        g = self.Q @ u + self.q
        return g[:len(x)], g[len(x):]

    def lipschitz(self):
        if self.Q.shape != (self.dim, self.dim):
            return None
        if self.dim == 0:
            return 0.
        return float(max(scipy.linalg.eigvalsh(self.Q)[-1], 0.))

    def max_grad_norm(self, box, n_private):
        """
        Maximum norms of the two gradient parts over a box. A convex norm
        of an affine map peaks at a corner: corners are enumerated when
        there are at most MAX_CORNERS, otherwise the bound
        |G c + g| + sigma_max(G) r around the box center c is returned.

        :param box: BoxSet of the stacked variable (x, xt)
        :param n_private: length of the private part x
        """
        parts = (slice(0, n_private), slice(n_private, self.dim))
        free = np.flatnonzero(box.upper > box.lower)
        if 2**len(free) <= MAX_CORNERS:
            return tuple(self._max_over_corners(box, free, part)
                         for part in parts)
        center = box.midpoint()
        radius = 0.5 * box.diameter()
        bounds = []
        for part in parts:
            G, g = self.Q[part], self.q[part]
            if G.size == 0:
                bounds.append(0.)
                continue
            sigma = scipy.linalg.svdvals(G)[0]
            bounds.append(float(np.linalg.norm(G @ center + g)
                                + sigma * radius))
        return tuple(bounds)

    def _max_over_corners(self, box, free, part):
        G, g = self.Q[part], self.q[part]
        if G.shape[0] == 0:
            return 0.
        base = G @ box.lower + g
        steps = G[:, free] * (box.upper[free] - box.lower[free])
        powers = np.arange(len(free))
        total = 2**len(free)
        best = 0.
        for start in range(0, total, _CORNER_CHUNK):
            index = np.arange(start, min(start + _CORNER_CHUNK, total))
            corners = ((index[:, None] >> powers) & 1).astype(float)
            values = base + corners @ steps.T
            best = max(best, float(np.max(np.linalg.norm(values, axis=1))))
        return best


def objective_from_dict(record):
    return QuadraticObjective.from_dict(record)


class LocalBlock(object):
    """
    Data private to one agent: objective f^k(x^k, xt), coupled constraint
    slices A^k, b^k, C^k, d^k and the box X^k.

    :param dim: number of private variables n_k
    :param objective: ObjectiveFn of the stacked variable (x^k, xt)
    :param A: m x n_k equality slice
    :param b: equality right-hand side share, length m
    :param C: h x n_k inequality slice
    :param d: inequality right-hand side share, length h
    :param box: BoxSet of length n_k
    :param lipschitz: gradient Lipschitz constant L_k (defaults to the one
    of the objective)
    """

    def __init__(self, dim, objective, A, b, C, d, box, lipschitz=None):
        self.dim = int(dim)
        self.objective = objective
        self.A = _as_matrix(A, self.dim)
        self.b = _as_vector(b)
        self.C = _as_matrix(C, self.dim)
        self.d = _as_vector(d)
        self.box = box
        if lipschitz is None:
            lipschitz = objective.lipschitz()
        self.lipschitz = None if lipschitz is None else float(lipschitz)

    @classmethod
    def from_dict(cls, record):
        dim = int(record['dim'])
        return cls(dim, objective_from_dict(record['objective']),
                   record.get('A', []), record.get('b', []),
                   record.get('C', []), record.get('d', []),
                   BoxSet.from_dict(record['box']),
                   record.get('lipschitz'))

    def to_dict(self):
        return {'dim': self.dim,
                'objective': self.objective.to_dict(),
                'A': self.A.tolist(), 'b': self.b.tolist(),
                'C': self.C.tolist(), 'd': self.d.tolist(),
                'box': self.box.to_dict(),
                'lipschitz': self.lipschitz}

    @cached_property
    def AC(self):
        """ Stacked slice (A^k; C^k). """
        ac = np.vstack([self.A, self.C])
        ac.setflags(write=False)
        return ac

    @cached_property
    def bd(self):
        bd = np.concatenate([self.b, self.d])
        bd.setflags(write=False)
        return bd


class SharedBlock(object):
    """
    Shared variable xt with its own constraints Atil xt = btil,
    Ctil xt <= dtil and box. A zero-length block stands for no shared
    variable.
    """

    def __init__(self, dim, Atil, btil, Ctil, dtil, box):
        self.dim = int(dim)
        self.Atil = _as_matrix(Atil, self.dim)
        self.btil = _as_vector(btil)
        self.Ctil = _as_matrix(Ctil, self.dim)
        self.dtil = _as_vector(dtil)
        self.box = box

    @classmethod
    def empty(cls):
        return cls(0, [], [], [], [], BoxSet.empty())

    @classmethod
    def from_dict(cls, record):
        if record is None:
            return cls.empty()
        dim = int(record.get('dim', 0))
        box = record.get('box', {'lower': [], 'upper': []})
        return cls(dim, record.get('Atil', []), record.get('btil', []),
                   record.get('Ctil', []), record.get('dtil', []),
                   BoxSet.from_dict(box))

    def to_dict(self):
        return {'dim': self.dim,
                'Atil': self.Atil.tolist(), 'btil': self.btil.tolist(),
                'Ctil': self.Ctil.tolist(), 'dtil': self.dtil.tolist(),
                'box': self.box.to_dict()}

    @property
    def m(self):
        return self.Atil.shape[0]

    @property
    def h(self):
        return self.Ctil.shape[0]

    @cached_property
    def AC(self):
        ac = np.vstack([self.Atil, self.Ctil])
        ac.setflags(write=False)
        return ac

    @cached_property
    def bd(self):
        bd = np.concatenate([self.btil, self.dtil])
        bd.setflags(write=False)
        return bd


class ProblemSpec(object):
    """
    Decentralized problem: minimize sum_k f^k(x^k, xt) subject to the
    coupled constraints sum_k (A^k x^k - b^k) = 0, sum_k (C^k x^k - d^k) <= 0,
    the shared constraints on xt and the boxes, with agents exchanging
    information over `graph`.

    :param agents: list of LocalBlock, one per node of the graph
    :param shared: SharedBlock (use SharedBlock.empty() if absent)
    :param graph: communication Graph
    :param name: instance name
    :param metadata: free-form information carried along (e.g. units)
    """

    def __init__(self, agents, shared, graph, name='instance', metadata=None):
        if len(agents) == 0:
            raise InvalidInstanceError('At least one agent is required')
        self.agents = tuple(agents)
        self.shared = shared
        self.graph = graph
        self.name = name
        self.metadata = dict(metadata or {})
        self.m = self.agents[0].A.shape[0]
        self.h = self.agents[0].C.shape[0]

    @classmethod
    def from_dict(cls, record, name='instance'):
        """
        Parse the instance file format (keys `agents`, `shared`, `graph`).
        """
        try:
            agents = [LocalBlock.from_dict(a) for a in record['agents']]
            shared = SharedBlock.from_dict(record.get('shared'))
            graph = Graph.from_dict(record['graph'])
        except InvalidInstanceError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInstanceError('Malformed instance: '
                                       '{}: {}'.format(type(exc).__name__,
                                                       exc))
        return cls(agents, shared, graph,
                   name=record.get('name', name),
                   metadata=record.get('metadata'))

    def to_dict(self):
        for agent in self.agents:
            if not isinstance(agent.objective, QuadraticObjective):
                raise TypeError('Only quadratic objectives can be '
                                'serialised')
        record = {'name': self.name,
                  'agents': [a.to_dict() for a in self.agents],
                  'shared': self.shared.to_dict(),
                  'graph': self.graph.to_dict()}
        if self.metadata:
            record['metadata'] = self.metadata
        return record

    @property
    def l(self):
        return len(self.agents)

    @property
    def dims(self):
        return [a.dim for a in self.agents]

    @property
    def n(self):
        return sum(self.dims)

    @property
    def nt(self):
        return self.shared.dim

    @property
    def mt(self):
        return self.shared.m

    @property
    def ht(self):
        return self.shared.h

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def split(self, x):
        """ Partition a stacked private vector into agent blocks. """
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError('Private vector of length {} expected, '
                                 'got shape {}'.format(self.n, x.shape))
        return [x[self.offsets[k]:self.offsets[k+1]] for k in range(self.l)]

    def join(self, blocks):
        """ Concatenate agent blocks into the stacked private vector. """
        if len(blocks) != self.l:
            raise DimensionError('{} blocks expected, got '
                                 '{}'.format(self.l, len(blocks)))
        for k, (block, dim) in enumerate(zip(blocks, self.dims)):
            if len(block) != dim:
                raise DimensionError('Block {} of length {} expected, got '
                                     '{}'.format(k, dim, len(block)))
        if self.n == 0:
            return np.zeros(0)
        return np.concatenate([np.asarray(b, dtype=float) for b in blocks])

    @cached_property
    def stacked_A(self):
        """ Centralized equality matrix [A^1 ... A^l]. """
        return np.hstack([a.A for a in self.agents])

    @cached_property
    def stacked_C(self):
        return np.hstack([a.C for a in self.agents])

    @cached_property
    def stacked_b(self):
        return np.sum([a.b for a in self.agents], axis=0).reshape(self.m)

    @cached_property
    def stacked_d(self):
        return np.sum([a.d for a in self.agents], axis=0).reshape(self.h)

    @cached_property
    def box(self):
        """ Box of the stacked private vector x. """
        return BoxSet(np.concatenate([a.box.lower for a in self.agents]),
                      np.concatenate([a.box.upper for a in self.agents]))

    def agent_box(self, k):
        """ Box of the stacked variable (x^k, xt) of agent k. """
        agent = self.agents[k]
        return BoxSet(np.concatenate([agent.box.lower, self.shared.box.lower]),
                      np.concatenate([agent.box.upper, self.shared.box.upper]))

    @property
    def is_quadratic(self):
        return all(isinstance(a.objective, QuadraticObjective)
                   for a in self.agents)

    def validate(self):
        return validate(self)

    def __repr__(self):
        return ('ProblemSpec(name={}, l={}, n={}, nt={}, m={}, h={}, mt={}, '
                'ht={})'.format(self.name, self.l, self.n, self.nt, self.m,
                                self.h, self.mt, self.ht))


def validate(spec):
    """
    Check the invariants of an instance.

    :param spec: ProblemSpec
    :return: list of violations, empty if the instance is valid
    """
    violations = []
    for k, agent in enumerate(spec.agents):
        name = 'agent {}'.format(k)
        if agent.dim < 1:
            violations.append('{}: dimension should be positive'.format(name))
        for label, mat, rows in (('A', agent.A, spec.m),
                                 ('C', agent.C, spec.h)):
            if mat.ndim != 2 or mat.shape[1] != agent.dim:
                violations.append('{}: dimension mismatch, {} has shape {} '
                                  'but the block has {} '
                                  'variables'.format(name, label, mat.shape,
                                                     agent.dim))
            elif mat.shape[0] != rows:
                violations.append('{}: {} has {} rows, {} '
                                  'expected'.format(name, label, mat.shape[0],
                                                    rows))
        for label, vec, rows in (('b', agent.b, spec.m),
                                 ('d', agent.d, spec.h)):
            if len(vec) != rows:
                violations.append('{}: {} has length {}, {} '
                                  'expected'.format(name, label, len(vec),
                                                    rows))
        violations += agent.box.check('{} box'.format(name))
        if agent.box.dim != agent.dim:
            violations.append('{}: box of length {}, {} '
                              'expected'.format(name, agent.box.dim,
                                                agent.dim))
        objective_violations = []
        if isinstance(agent.objective, QuadraticObjective):
            objective_violations = agent.objective.check(
                agent.dim + spec.nt, '{} objective'.format(name))
        if agent.lipschitz is None or agent.lipschitz < 0.:
            violations.append('{}: Lipschitz constant should be a '
                              'non-negative number'.format(name))
        elif not objective_violations:
            objective_violations = _check_declared_lipschitz(
                spec, agent, name, seed=k)
        violations += objective_violations

    shared = spec.shared
    for label, mat in (('Atil', shared.Atil), ('Ctil', shared.Ctil)):
        if mat.ndim != 2 or mat.shape[1] != shared.dim:
            violations.append('shared block: dimension mismatch, {} has shape '
                              '{} but the block has {} '
                              'variables'.format(label, mat.shape,
                                                 shared.dim))
    if len(shared.btil) != shared.Atil.shape[0]:
        violations.append('shared block: btil has length {}, {} '
                          'expected'.format(len(shared.btil),
                                            shared.Atil.shape[0]))
    if len(shared.dtil) != shared.Ctil.shape[0]:
        violations.append('shared block: dtil has length {}, {} '
                          'expected'.format(len(shared.dtil),
                                            shared.Ctil.shape[0]))
    violations += shared.box.check('shared box')
    if shared.box.dim != shared.dim:
        violations.append('shared block: box of length {}, {} '
                          'expected'.format(shared.box.dim, shared.dim))

    if spec.graph.node_count != spec.l:
        violations.append('graph has {} nodes but there are {} '
                          'agents'.format(spec.graph.node_count, spec.l))
    if not spec.graph.is_connected:
        violations.append('graph is not connected')
    return violations


def _check_declared_lipschitz(spec, agent, name, seed=0):
    """
    Compare the declared Lipschitz constant with the curvature of the
    objective: exactly for quadratics, by sampling for callables on a finite
    box.
    """
    if isinstance(agent.objective, QuadraticObjective):
        largest = agent.objective.lipschitz()
        if largest is not None and \
                agent.lipschitz < largest * (1. - 1e-9) - 1e-12:
            return ['{}: declared Lipschitz constant {} is below the largest '
                    'eigenvalue {} of Q'.format(name, agent.lipschitz,
                                                largest)]
        return []
    if agent.dim < 1 or agent.box.dim != agent.dim or agent.box.check():
        return []
    shared_box = spec.shared.box
    if not (np.all(np.isfinite(agent.box.lower)) and
            np.all(np.isfinite(agent.box.upper)) and
            np.all(np.isfinite(shared_box.lower)) and
            np.all(np.isfinite(shared_box.upper))):
        return []
    try:
        report = check_objective(agent, shared_box, seed=seed)
    except (ArithmeticError, TypeError, ValueError) as exc:
        return ['{}: objective could not be evaluated: '
                '{}: {}'.format(name, type(exc).__name__, exc)]
    # One line per kind of failed check
    violations, kinds = [], set()
    for line in report:
        kind = line.split(' ')[0]
        if kind not in kinds:
            kinds.add(kind)
            violations.append('{} objective: {}'.format(name, line))
    return violations


def _check_dimensions(spec, x, xt):
    x = np.asarray(x, dtype=float)
    xt = np.asarray(xt, dtype=float)
    if x.shape != (spec.n,):
        raise DimensionError('Private vector of length {} expected, got '
                             'shape {}'.format(spec.n, x.shape))
    if xt.shape != (spec.nt,):
        raise DimensionError('Shared vector of length {} expected, got '
                             'shape {}'.format(spec.nt, xt.shape))
    return x, xt


def centralized_objective(spec, x, xt):
    """
    Objective sum_k f^k(x^k, xt).

    :param spec: ProblemSpec
    :param x: stacked private vector, length n
    :param xt: shared vector, length nt
    """
    x, xt = _check_dimensions(spec, x, xt)
    return float(sum(agent.objective.eval(xk, xt)
                     for agent, xk in zip(spec.agents, spec.split(x))))


def coupled_residuals(spec, x, xt):
    """
    Residuals of the coupled and shared constraints.

    :param spec: ProblemSpec
    :param x: stacked private vector, length n
    :param xt: shared vector, length nt
    :return: tuple (eq, ineq, sheq, shineq)
    """
    x, xt = _check_dimensions(spec, x, xt)
    eq = np.zeros(spec.m)
    ineq = np.zeros(spec.h)
    for agent, xk in zip(spec.agents, spec.split(x)):
        eq += agent.A @ xk - agent.b
        ineq += agent.C @ xk - agent.d
    sheq = spec.shared.Atil @ xt - spec.shared.btil
    shineq = spec.shared.Ctil @ xt - spec.shared.dtil
    return eq, ineq, sheq, shineq


def check_objective(agent, shared_box=None, n_samples=20, seed=0, tol=1e-6):
    """
    Sample-based checks of an agent's objective over its box: gradient
    against central finite differences, midpoint convexity and the declared
    Lipschitz constant.

    :param agent: LocalBlock
    :param shared_box: BoxSet of the shared variable (None if absent)
    :param n_samples: number of sampled points (pairs)
    :param seed: random seed
    :param tol: relative tolerance
    :return: list of failed checks, empty if all pass
    """
    shared_box = shared_box if shared_box is not None else BoxSet.empty()
    box = BoxSet(np.concatenate([agent.box.lower, shared_box.lower]),
                 np.concatenate([agent.box.upper, shared_box.upper]))
    n = agent.dim
    f = agent.objective

    def value(u):
        return f.eval(u[:n], u[n:])

    def gradient(u):
        return np.concatenate(f.grad(u[:n], u[n:]))

    rng = np.random.default_rng(seed)
    report = []
    scale = max(box.diameter(), 1.)
    step = 1e-6 * scale
    for _ in range(n_samples):
        a, b = box.sample(rng), box.sample(rng)
        g = gradient(a)
        fd = np.array([(value(a + step * e) - value(a - step * e)) / (2 * step)
                       for e in np.eye(len(a))])
        if np.linalg.norm(g - fd) > 1e-5 * max(np.linalg.norm(g), 1.):
            report.append('gradient differs from finite differences at '
                          '{}'.format(a.tolist()))
        if value(0.5 * (a + b)) > 0.5 * (value(a) + value(b)) + tol * scale:
            report.append('midpoint convexity violated between {} and '
                          '{}'.format(a.tolist(), b.tolist()))
        lipschitz = agent.lipschitz or 0.
        lhs = np.linalg.norm(gradient(a) - gradient(b))
        if lhs > lipschitz * np.linalg.norm(a - b) * (1. + tol) + tol:
            report.append('Lipschitz constant {} exceeded between {} and '
                          '{}'.format(lipschitz, a.tolist(), b.tolist()))
    return report
