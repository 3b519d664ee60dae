import unittest

import numpy as np
import scipy.linalg

from dextra.graph import Graph
from dextra.instances import random_instance
from dextra.oracle import InfeasibleInstanceError, kkt_residual, \
    solve_centralized, to_qp
from dextra.problem import BoxSet, LocalBlock, ObjectiveFn, ProblemSpec, \
    QuadraticObjective, SharedBlock
from dextra.saddle import SaddlePointProblem, compute_constants
from dextra.solver import iterate_once

from .tools import SHARED_SOLUTION, shared_spec, tiny_spec, weighted_spec


class TestToQp(unittest.TestCase):

    def test_sharedSpec(self):
        qp = to_qp(shared_spec())
        self.assertEqual(qp.size, 4)
        self.assertEqual(qp.E.shape, (0, 4))
        np.testing.assert_array_equal(qp.G, [[1., 1., 1., 0.],
                                             [0., 0., 0., 1.]])
        np.testing.assert_allclose(qp.g, [1., 0.5])
        # the shared variable collects the curvature of every agent
        self.assertEqual(qp.P[3, 3], 3.)

    def test_objectiveMatchesInstance(self):
        spec = random_instance(1)
        qp = to_qp(spec)
        u = np.concatenate([spec.box.midpoint(), spec.shared.box.midpoint()])
        value = sum(a.objective.eval(xk, u[spec.n:])
                    for a, xk in zip(spec.agents, spec.split(u[:spec.n])))
        self.assertAlmostEqual(qp.objective(u), value)

    def test_nonQuadratic(self):
        f = ObjectiveFn(lambda x, xt: 0., lambda x, xt: (0. * x, 0. * xt),
                        lipschitz=0.)
        agents = [LocalBlock(1, f, [], [], [], [], BoxSet([0.], [1.]))] * 2
        spec = ProblemSpec(agents, SharedBlock.empty(), Graph(2, [(0, 1)]))
        with self.assertRaises(TypeError):
            to_qp(spec)
        with self.assertRaises(TypeError):
            solve_centralized(spec, method='enumerate')


class TestEnumeration(unittest.TestCase):

    def test_tiny(self):
        solution = solve_centralized(tiny_spec(), method='enumerate')
        np.testing.assert_allclose(solution.x_star, [1., 1.], atol=1e-10)
        np.testing.assert_allclose(solution.y_star, [-1.], atol=1e-10)
        self.assertAlmostEqual(solution.objective, 1.)
        self.assertLess(solution.kkt_residual, 1e-8)
        self.assertEqual(solution.method, 'enumerate')

    def test_sharedVariable(self):
        solution = solve_centralized(shared_spec())
        np.testing.assert_allclose(solution.x_star, SHARED_SOLUTION['x'],
                                   atol=1e-10)
        np.testing.assert_allclose(solution.xt_star, SHARED_SOLUTION['xt'],
                                   atol=1e-10)
        np.testing.assert_allclose(solution.y_star, SHARED_SOLUTION['y'],
                                   atol=1e-10)
        np.testing.assert_allclose(solution.yt_star, SHARED_SOLUTION['yt'],
                                   atol=1e-10)
        self.assertAlmostEqual(solution.objective,
                               SHARED_SOLUTION['objective'])
        self.assertEqual(solution.active_set['rows'], [0, 1])

    def test_activeBox(self):
        # minimum of (x - 10)^2 / 2 on [-5, 5] is at the upper face
        agents = [LocalBlock(1, QuadraticObjective([[1.]], [-10.], 50.), [],
                             [], [], [], BoxSet([-5.], [5.]))
                  for _ in range(2)]
        spec = ProblemSpec(agents, SharedBlock.empty(), Graph(2, [(0, 1)]))
        solution = solve_centralized(spec)
        np.testing.assert_allclose(solution.x_star, [5., 5.])
        self.assertAlmostEqual(solution.objective, 25.)

    def test_capExceeded(self):
        with self.assertRaises(ValueError):
            solve_centralized(shared_spec(), method='enumerate', enum_cap=1)

    def test_unknownMethod(self):
        with self.assertRaises(ValueError):
            solve_centralized(tiny_spec(), method='newton')

    def test_infeasible(self):
        agents = [LocalBlock(1, QuadraticObjective([[1.]], [0.]), [[1.]],
                             [10.], [], [], BoxSet([-5.], [5.]))
                  for _ in range(2)]
        spec = ProblemSpec(agents, SharedBlock.empty(), Graph(2, [(0, 1)]))
        with self.assertRaises(InfeasibleInstanceError):
            solve_centralized(spec)

    def test_toDict(self):
        record = solve_centralized(tiny_spec()).to_dict()
        np.testing.assert_allclose(record['x_star'], [1., 1.])
        self.assertIn('kkt_residual', record)


class TestOtherMethods(unittest.TestCase):

    def test_cvxpyAgreesWithEnumeration(self):
        for spec in (tiny_spec(), shared_spec(), weighted_spec()):
            exact = solve_centralized(spec, method='enumerate')
            polished = solve_centralized(spec, method='cvxpy')
            np.testing.assert_allclose(polished.objective, exact.objective,
                                       rtol=1e-7, atol=1e-8)
            np.testing.assert_allclose(polished.x_star, exact.x_star,
                                       atol=1e-6)
            self.assertLess(polished.kkt_residual, 1e-6)

    def test_extragradient(self):
        solution = solve_centralized(tiny_spec(), method='extragradient',
                                     fallback_iters=20000)
        np.testing.assert_allclose(solution.x_star, [1., 1.], atol=1e-4)
        np.testing.assert_allclose(solution.objective, 1., atol=1e-3)

    def test_nonQuadraticUsesExtragradient(self):
        f = ObjectiveFn(lambda x, xt: 0.5 * x @ x, lambda x, xt: (x, xt),
                        lipschitz=1.)
        agents = [LocalBlock(1, f, [[1.]], [1.], [], [], BoxSet([-5.], [5.]))
                  for _ in range(2)]
        spec = ProblemSpec(agents, SharedBlock.empty(), Graph(2, [(0, 1)]))
        solution = solve_centralized(spec, fallback_iters=20000)
        self.assertEqual(solution.method, 'extragradient')
        np.testing.assert_allclose(solution.x_star, [1., 1.], atol=1e-4)


class TestKktResidual(unittest.TestCase):

    def test_zeroAtSolution(self):
        spec = shared_spec()
        residual = kkt_residual(spec, SHARED_SOLUTION['x'],
                                SHARED_SOLUTION['xt'], SHARED_SOLUTION['y'],
                                SHARED_SOLUTION['yt'])
        self.assertLess(residual, 1e-12)

    def test_wrongMultiplier(self):
        residual = kkt_residual(tiny_spec(), np.ones(2), np.zeros(0),
                                np.array([1.]), np.zeros(0))
        self.assertGreater(residual, 1.)

    def test_infeasiblePoint(self):
        residual = kkt_residual(tiny_spec(), np.zeros(2), np.zeros(0),
                                np.zeros(1), np.zeros(0))
        self.assertGreater(residual, 1.)


class TestSaddlePoint(unittest.TestCase):

    def _check_fixed_point(self, spec, atol=1e-8):
        solution = solve_centralized(spec)
        zeta = solution.saddle_point(spec)
        half, nxt = iterate_once(spec, zeta, 0.1)
        np.testing.assert_allclose(half.data, zeta.data, atol=atol)
        np.testing.assert_allclose(nxt.data, zeta.data, atol=atol)

    def test_tinyFixedPoint(self):
        self._check_fixed_point(tiny_spec())

    def test_sharedFixedPoint(self):
        self._check_fixed_point(shared_spec())

    def test_randomFixedPoint(self):
        self._check_fixed_point(random_instance(5, n_agents=4), atol=1e-6)

    def test_copiesOfSolution(self):
        spec = shared_spec()
        zeta = solve_centralized(spec).saddle_point(spec)
        np.testing.assert_allclose(zeta.y, np.full(3, 2. / 3.))
        np.testing.assert_allclose(zeta.yt, np.full(3, 0.5))
        np.testing.assert_allclose(zeta.xt, np.full(3, 0.5))

    def test_lagrangianAtSaddlePointIsObjective(self):
        spec = random_instance(2, n_agents=3)
        solution = solve_centralized(spec)
        zeta = solution.saddle_point(spec)
        value = SaddlePointProblem(spec).lagrangian(zeta)
        np.testing.assert_allclose(value, solution.objective, rtol=1e-6,
                                   atol=1e-6)


class TestOptimality(unittest.TestCase):

    def _within_dual_radius(self, spec, solution):
        radius = compute_constants(spec).R_y / np.sqrt(spec.l)
        self.assertLessEqual(np.linalg.norm(solution.y_star),
                             radius * (1. + 1e-9))

    def test_multipliersWithinDualRadius(self):
        for spec in (tiny_spec(), shared_spec(), weighted_spec()):
            with self.subTest(instance=spec.name):
                self._within_dual_radius(spec, solve_centralized(spec))

    def test_randomMultipliersWithinDualRadius(self):
        # stationarity in x reads grad f + A^T y = 0 when no inequality row
        # and no private box face is active
        for seed in range(40):
            spec = random_instance(seed)
            solution = solve_centralized(spec)
            faces = [i for i, _ in solution.active_set['faces']
                     if i < spec.n]
            if spec.h > 0 or faces:
                continue
            with self.subTest(seed=seed):
                self._within_dual_radius(spec, solution)

    def test_noBetterFeasiblePoint(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            spec = random_instance(seed)
            solution = solve_centralized(spec)
            qp = to_qp(spec)
            u_star = np.concatenate([solution.x_star, solution.xt_star])
            directions = (scipy.linalg.null_space(qp.E) if len(qp.e)
                          else np.eye(qp.size))
            for _ in range(200):
                u = u_star + directions @ rng.normal(
                    scale=0.1, size=directions.shape[1])
                feasible = (np.all(qp.G @ u <= qp.g + 1e-12)
                            and np.all(u >= qp.lower)
                            and np.all(u <= qp.upper))
                if not feasible:
                    continue
                with self.subTest(seed=seed):
                    self.assertGreaterEqual(qp.objective(u),
                                            solution.objective - 1e-9)
            exact = solution.objective
            polished = solve_centralized(spec, method='cvxpy').objective
            np.testing.assert_allclose(polished, exact, rtol=1e-7, atol=1e-8)

    def test_capSwitchesToCvxpy(self):
        solution = solve_centralized(shared_spec(), enum_cap=1)
        self.assertEqual(solution.method, 'cvxpy')
        np.testing.assert_allclose(solution.objective,
                                   SHARED_SOLUTION['objective'], atol=1e-8)
        self.assertEqual(solve_centralized(shared_spec()).method, 'enumerate')
