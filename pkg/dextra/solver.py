import logging
import math

import numpy as np
import pandas as pd
import scipy.spatial.distance

from dextra.graph import laplacian, lifted_matvec
from dextra.problem import centralized_objective, coupled_residuals
from dextra.saddle import (IterateVector, SaddlePointProblem,
                           compute_constants, euclidean_lipschitz,
                           function_residual_bound, gap_bound,
                           residual_bounds)


logger = logging.getLogger(__name__)

STEP_RULES = ('auto', 'lipschitz')
INIT_RULES = ('midpoint', 'random')

# Safety factor of the 'lipschitz' step rule
_LIPSCHITZ_STEP_FACTOR = 0.9


class DivergenceError(ArithmeticError):
    """ Non-finite values in the iterates (step size too large). """


class MalformedTraceError(ValueError):
    """ A trace table cannot be read back. """


class SolverConfig(object):
    """
    Settings of the extragradient solver.

    :param max_iters: number of iterations N
    :param step_size: positive number, 'auto' (1/L_zeta) or 'lipschitz'
    (0.9 over the Euclidean Lipschitz constant of the operator)
    :param record_every: trace recording period
    :param tolerance: early stop when the sum of the residual norms at the
    ergodic average drops below this value (0 runs all iterations)
    :param seed: seed of the random initial point
    :param init: 'midpoint' (box centers) or 'random' (uniform in the boxes)
    :param adaptive: halve the step and restart on non-finite iterates
    :param max_halvings: maximum number of halvings with `adaptive`
    :param comparator: (optional) reference solution (e.g. from the oracle)
    for the duality-gap surrogate
    """

    def __init__(self, max_iters=100000, step_size='auto', record_every=100,
                 tolerance=0., seed=0, init='midpoint', adaptive=False,
                 max_halvings=30, comparator=None):
        if int(max_iters) != max_iters or max_iters < 0:
            raise ValueError('Number of iterations should be a non-negative '
                             'integer, got {}'.format(max_iters))
        if isinstance(step_size, str):
            if step_size not in STEP_RULES:
                raise ValueError('Unknown step size rule: '
                                 '{}'.format(step_size))
        elif not step_size > 0:
            raise ValueError('Step size should be positive, got '
                             '{}'.format(step_size))
        else:
            step_size = float(step_size)
        if int(record_every) != record_every or record_every < 1:
            raise ValueError('Recording period should be a positive integer, '
                             'got {}'.format(record_every))
        if tolerance < 0:
            raise ValueError('Tolerance should be non-negative')
        if init not in INIT_RULES:
            raise ValueError('Unknown initialization: {}'.format(init))
        self.max_iters = int(max_iters)
        self.step_size = step_size
        self.record_every = int(record_every)
        self.tolerance = float(tolerance)
        self.seed = int(seed)
        self.init = init
        self.adaptive = bool(adaptive)
        self.max_halvings = int(max_halvings)
        self.comparator = comparator

    def to_dict(self):
        return {'max_iters': self.max_iters,
                'step_size': self.step_size,
                'record_every': self.record_every,
                'tolerance': self.tolerance,
                'seed': self.seed,
                'init': self.init,
                'adaptive': self.adaptive,
                'max_halvings': self.max_halvings,
                'comparator': self.comparator is not None}


class RunTrace(object):
    """ Diagnostics recorded along a run, one row per recorded iteration. """
    COLUMNS = ('iter', 'objective', 'eq_residual', 'ineq_residual',
               'shared_eq_residual', 'shared_ineq_residual', 'consensus_dual',
               'consensus_primal', 'xt_disagreement', 'gap_surrogate')

    def __init__(self, rows=None):
        self.rows = []
        for row in rows or []:
            self.append(row)

    def append(self, row):
        if self.rows and row['iter'] <= self.rows[-1]['iter']:
            raise ValueError('Iteration indices should be strictly '
                             'increasing: {} after '
                             '{}'.format(row['iter'], self.rows[-1]['iter']))
        self.rows.append({name: row[name] for name in self.COLUMNS})

    def __len__(self):
        return len(self.rows)

    def last(self):
        return dict(self.rows[-1])

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_frame(self):
        frame = pd.DataFrame(self.rows, columns=list(self.COLUMNS))
        return frame.astype({'iter': int})

    def write(self, path):
        """ Write the trace as a comma-separated table with header. """
        self.to_frame().to_csv(path, index=False, float_format='%.17g',
                               na_rep='nan')

    @classmethod
    def read(cls, path):
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError,
                UnicodeDecodeError) as exc:
            raise MalformedTraceError('Cannot parse trace {}: '
                                      '{}'.format(path, exc))
        if tuple(frame.columns) != cls.COLUMNS:
            raise MalformedTraceError('Unexpected trace columns: '
                                      '{}'.format(list(frame.columns)))
        try:
            frame = frame.astype(float)
        except ValueError as exc:
            raise MalformedTraceError('Non-numeric trace entries: '
                                      '{}'.format(exc))
        if not np.all(np.isfinite(frame['iter'])) \
                or np.any(frame['iter'] != np.round(frame['iter'])):
            raise MalformedTraceError('Iteration column should hold '
                                      'integers')
        rows = frame.to_dict('records')
        for row in rows:
            row['iter'] = int(row['iter'])
        try:
            return cls(rows)
        except ValueError as exc:
            raise MalformedTraceError(str(exc))


class SolverOutput(object):
    """
    Result of a run: ergodic average of the half-iterates, last iterate,
    trace, constants and bound report.
    """

    def __init__(self, averages, last, trace, constants, bound_report,
                 step_size, iterations, halvings=0, stopped_early=False):
        self.averages = averages
        self.last = last
        self.trace = trace
        self.constants = constants
        self.bound_report = bound_report
        self.step_size = step_size
        self.iterations = iterations
        self.halvings = halvings
        self.stopped_early = stopped_early


class CompensatedSum(object):
    """ Running sum of vectors with Kahan error compensation. """

    def __init__(self, size):
        self.total = np.zeros(size)
        self._compensation = np.zeros(size)
        self.count = 0

    def add(self, v):
        y = v - self._compensation
        t = self.total + y
        self._compensation = (t - self.total) - y
        self.total = t
        self.count += 1

    def mean(self):
        if self.count == 0:
            raise ValueError('No term has been added')
        return self.total / self.count


def _positive_norm(v):
    return float(np.linalg.norm(np.maximum(v, 0.)))


def _diagnostics(problem, monitor, zeta, iteration, comparator=None):
    spec = problem.spec
    xt_mean = zeta.xt_mean()
    eq, ineq, sheq, shineq = coupled_residuals(spec, zeta.x, xt_mean)
    xt_blocks = zeta.xt.reshape(spec.l, spec.nt)
    if spec.nt > 0:
        disagreement = float(np.max(scipy.spatial.distance.pdist(xt_blocks)))
    else:
        disagreement = 0.
    row = {'iter': int(iteration),
           'objective': centralized_objective(spec, zeta.x, xt_mean),
           'eq_residual': float(np.linalg.norm(eq)),
           'ineq_residual': _positive_norm(ineq),
           'shared_eq_residual': float(np.linalg.norm(sheq)),
           'shared_ineq_residual': _positive_norm(shineq),
           'consensus_dual': float(np.linalg.norm(
               lifted_matvec(monitor.W, zeta.y))),
           'consensus_primal': float(np.linalg.norm(
               lifted_matvec(monitor.Wt, zeta.xt))),
           'xt_disagreement': disagreement,
           'gap_surrogate': np.nan}
    if comparator is not None:
        row['gap_surrogate'] = gap_surrogate(monitor, zeta, comparator)
    return row


def gap_surrogate(problem, zeta, comparator):
    """
    G_w at (candidate primal, zero duals) minus G_w at (comparator primal,
    zero z, candidate duals).

    :param problem: SaddlePointProblem
    :param zeta: IterateVector
    :param comparator: object with `x_star` and `xt_star`
    """
    spec = problem.spec
    primal = IterateVector.from_components(spec, x=zeta.x, xt=zeta.xt,
                                           z=zeta.z)
    dual = IterateVector.from_components(
        spec, x=comparator.x_star, xt=np.tile(comparator.xt_star, spec.l),
        y=zeta.y, yt=zeta.yt, zt=zeta.zt)
    return problem.lagrangian(primal) - problem.lagrangian(dual)


def residual_sum(row):
    """ Sum of the residual norms of a trace row. """
    return sum(row[name] for name in RunTrace.COLUMNS[2:-1])


class ExtragradientSolver(object):
    """
    Decentralized extragradient: from zeta_i, a trial step
    zeta_half = P(zeta_i - h F(zeta_i)) and a full step
    zeta_next = P(zeta_i - h F(zeta_half)); the output is the ergodic mean
    of the trial points.

    :param spec: ProblemSpec
    :param config: SolverConfig
    :param W: (optional) CommunicationMatrix for the dual consensus, block
    size m+h
    :param Wt: (optional) CommunicationMatrix for the shared variable, block
    size nt
    """

    def __init__(self, spec, config=None, W=None, Wt=None):
        self.spec = spec
        self.config = config if config is not None else SolverConfig()
        self.problem = SaddlePointProblem(spec, W, Wt)
        # Diagnostics communicate through their own copies of the matrices
        self.monitor = SaddlePointProblem(
            spec, self.problem.W.lift(self.problem.W.block_dim),
            self.problem.Wt.lift(self.problem.Wt.block_dim))
        self.constants = compute_constants(spec, laplacian(spec.graph))

    def resolve_step_size(self):
        rule = self.config.step_size
        if rule == 'auto':
            step = self.constants.step_size
        elif rule == 'lipschitz':
            lipschitz = euclidean_lipschitz(self.spec, self.monitor.W,
                                            self.monitor.Wt)
            step = (_LIPSCHITZ_STEP_FACTOR / lipschitz if lipschitz > 0.
                    else np.inf)
        else:
            step = rule
        if not np.isfinite(step):
            raise ValueError('Step size cannot be derived with rule {}: the '
                             'operator is constant'.format(rule))
        logger.info('Step size {:.6g} ({})'.format(
            step, rule if isinstance(rule, str) else 'user'))
        return step

    def initial_point(self):
        spec, cfg = self.spec, self.config
        if cfg.init == 'midpoint':
            x0 = spec.box.midpoint()
            xt0 = spec.shared.box.midpoint()
        else:
            rng = np.random.default_rng(cfg.seed)
            x0 = spec.box.sample(rng)
            xt0 = spec.shared.box.sample(rng)
        return IterateVector.from_components(spec, x=x0,
                                             xt=np.tile(xt0, spec.l))

    def step(self, zeta, step_size):
        """
        One extragradient round.

        :param zeta: IterateVector, feasible
        :param step_size: step h
        :return: (zeta_half, zeta_next)
        """
        half, nxt = self._step(zeta.data, step_size)
        layout = self.problem.layout
        return IterateVector(layout, half), IterateVector(layout, nxt)

    def _step(self, v, h):
        problem = self.problem
        half = problem.project_flat(v - h * problem.operator_flat(v))
        nxt = problem.project_flat(v - h * problem.operator_flat(half))
        return half, nxt

    def diagnostics(self, zeta, iteration=0):
        return _diagnostics(self.problem, self.monitor, zeta, iteration,
                            self.config.comparator)

    def run(self, zeta0=None):
        """
        Run the solver, restarting with halved steps on divergence if the
        configuration allows it.

        :param zeta0: (optional) initial IterateVector
        """
        step_size = self.resolve_step_size()
        if zeta0 is None:
            zeta0 = self.initial_point()
        halvings = 0
        while True:
            try:
                output = self._run(zeta0, step_size)
            except DivergenceError:
                if not self.config.adaptive \
                        or halvings >= self.config.max_halvings:
                    raise
                halvings += 1
                step_size /= 2.
                logger.info('Non-finite iterate, restarting with step size '
                            '{:.6g} (halving {})'.format(step_size,
                                                         halvings))
                continue
            output.halvings = halvings
            return output

    def _run(self, zeta0, step_size):
        cfg = self.config
        layout = self.problem.layout
        n_iters = cfg.max_iters
        logger.info('Running extragradient on {} for {} iterations '
                    '...'.format(self.spec.name, n_iters))
        v = self.problem.project_flat(zeta0.data)
        start = IterateVector(layout, v.copy())
        trace = RunTrace()
        trace.append(self._record(start, 0))
        averages = CompensatedSum(layout.size)
        stopped_early = False
        iteration = 0
        for iteration in range(1, n_iters + 1):
            half, v = self._step(v, step_size)
            if not (np.all(np.isfinite(half)) and np.all(np.isfinite(v))):
                raise DivergenceError('Non-finite iterate at iteration {} '
                                      'with step size {:.6g}'.format(
                                          iteration, step_size))
            averages.add(half)
            if iteration % cfg.record_every == 0 or iteration == n_iters:
                row = self._record(IterateVector(layout, averages.mean()),
                                   iteration)
                trace.append(row)
                if cfg.tolerance > 0. and residual_sum(row) <= cfg.tolerance:
                    logger.info('... residuals below tolerance {:.3g} at '
                                'iteration {}'.format(cfg.tolerance,
                                                      iteration))
                    stopped_early = True
                    break
        logger.info('... {} iterations completed.'.format(iteration))

        if averages.count > 0:
            average = IterateVector(layout, averages.mean())
        else:
            average = start.copy()
        last = IterateVector(layout, v)
        report = self.bound_report(average, start, iteration)
        return SolverOutput(average, last, trace, self.constants, report,
                            step_size, iteration,
                            stopped_early=stopped_early)

    def _record(self, zeta, iteration):
        row = self.diagnostics(zeta, iteration)
        logger.debug('... iter {:8d} objective {:.10g} residuals '
                     '{:.3e}'.format(iteration, row['objective'],
                                     residual_sum(row)))
        return row

    def bound_report(self, average, start, n_iters):
        """
        Theoretical bounds after n_iters iterations. The gap bound uses the
        comparator's saddle point when available, the average otherwise.
        """
        constants = self.constants
        comparator = self.config.comparator
        if comparator is not None and hasattr(comparator, 'saddle_point'):
            reference, reference_name = (comparator.saddle_point(self.spec),
                                         'comparator')
        else:
            reference, reference_name = average, 'average'
        try:
            gap = gap_bound(constants, reference, start, n_iters)
        except ValueError as exc:
            logger.warning('Gap bound not available: {}'.format(exc))
            gap = np.nan
        report = {'iterations': int(n_iters),
                  'fn_residual_bound': function_residual_bound(constants,
                                                               n_iters),
                  'gap_bound': float(gap),
                  'gap_reference': reference_name}
        report.update(residual_bounds(constants, n_iters))
        return report


def run(spec, config=None):
    """
    Solve an instance with the decentralized extragradient method.

    :param spec: ProblemSpec
    :param config: SolverConfig
    :return: SolverOutput
    """
    return ExtragradientSolver(spec, config).run()


def iterate_once(spec, zeta, step_size, W=None, Wt=None):
    """
    One extragradient round from a feasible state.

    :return: (zeta_half, zeta_next)
    """
    problem = SaddlePointProblem(spec, W, Wt)
    v = zeta.data
    half = problem.project_flat(v - step_size * problem.operator_flat(v))
    nxt = problem.project_flat(v - step_size * problem.operator_flat(half))
    return (IterateVector(problem.layout, half),
            IterateVector(problem.layout, nxt))


def diagnostics(spec, zeta, comparator=None, iteration=0):
    """
    Residuals and objective of a state (typically an ergodic average), as a
    trace row.
    """
    problem = SaddlePointProblem(spec)
    return _diagnostics(problem, problem, zeta, iteration, comparator)


def expected_rows(n_iters, record_every):
    return int(math.ceil(n_iters / record_every)) + 1
