import unittest

import numpy as np
import pytest

from dextra.dcopf import interpret, to_problem_spec
from dextra.graph import random_connected_graph
from dextra.instances import data_path, random_instance, resolve_instance
from dextra.oracle import solve_centralized
from dextra.problem import ProblemSpec
from dextra.saddle import function_residual_bound
from dextra.solver import ExtragradientSolver, SolverConfig, diagnostics, run

from .tools import SpyCommunicationMatrix


RESIDUALS = ('eq_residual', 'ineq_residual', 'shared_eq_residual',
             'shared_ineq_residual')

# The 1/L_zeta step rule meets the same tolerances only with many more
# iterations, so the campaigns run with the 'lipschitz' rule.
STEP_RULE = 'lipschitz'


def _close_to_oracle(test, spec, output, oracle, rtol=1e-3, atol=1e-6,
                     residual_tol=1e-3):
    row = diagnostics(spec, output.averages)
    np.testing.assert_allclose(row['objective'], oracle.objective, rtol=rtol,
                               atol=atol)
    for name in RESIDUALS:
        test.assertLessEqual(row[name], residual_tol, msg=name)


def _slope(iterations, values, floor=1e-15):
    """ Slope of the log-log least-squares line through (N, value). """
    return np.polyfit(np.log(iterations),
                      np.log(np.maximum(values, floor)), 1)[0]


@pytest.mark.slow
class TestRandomCampaign(unittest.TestCase):

    n_instances = 50
    n_iters = 100000

    def test_oracleEquivalence(self):
        config = SolverConfig(max_iters=self.n_iters, record_every=10000,
                              step_size=STEP_RULE)
        for seed in range(self.n_instances):
            spec = random_instance(seed)
            oracle = solve_centralized(spec)
            output = run(spec, config)
            with self.subTest(seed=seed):
                _close_to_oracle(self, spec, output, oracle)


@pytest.mark.slow
class TestConvergenceRate(unittest.TestCase):

    n_instances = 10
    n_iters = 100000
    record_every = 1000

    @classmethod
    def setUpClass(cls):
        config = SolverConfig(max_iters=cls.n_iters,
                              record_every=cls.record_every,
                              step_size=STEP_RULE)
        cls.runs = []
        for seed in range(cls.n_instances):
            spec = random_instance(100 + seed)
            cls.runs.append((seed, spec, solve_centralized(spec),
                             run(spec, config)))

    def test_functionAndCoupledResidualSlopes(self):
        for seed, spec, oracle, output in self.runs:
            trace = output.trace.to_frame()
            trace = trace[trace['iter'] >= 1000]
            iterations = trace['iter'].to_numpy(dtype=float)
            function = np.abs(trace['objective'].to_numpy()
                              - oracle.objective)
            coupled = trace[list(RESIDUALS)].to_numpy().sum(axis=1)
            with self.subTest(seed=seed):
                self.assertLessEqual(_slope(iterations, function), -0.8)
                self.assertLessEqual(_slope(iterations, coupled), -0.8)

    def test_functionResidualWithinBound(self):
        for seed, spec, oracle, output in self.runs:
            trace = output.trace.to_frame()
            trace = trace[trace['iter'] > 0]
            with self.subTest(seed=seed):
                for n, value in zip(trace['iter'], trace['objective']):
                    bound = function_residual_bound(output.constants, int(n))
                    self.assertLessEqual(abs(value - oracle.objective),
                                         10. * bound)

    def test_consensusDecays(self):
        for seed, spec, oracle, output in self.runs:
            trace = output.trace.to_frame()
            burn_in = trace['iter'] >= 0.1 * self.n_iters
            with self.subTest(seed=seed):
                for column in ('consensus_dual', 'consensus_primal'):
                    values = trace.loc[burn_in, column].to_numpy()
                    self.assertTrue(np.all(values[1:]
                                           <= 1.5 * values[:-1] + 1e-12),
                                    msg=column)
                    self.assertLessEqual(values[-1], 1e-3, msg=column)


class TestCommunicationAudit(unittest.TestCase):
    """ Full runs read only the blocks of graph neighbours. """

    n_iters = 20

    def _audit(self, spec):
        ny, nt = spec.m + spec.h, spec.nt
        W = SpyCommunicationMatrix(spec.graph, block_dim=ny)
        Wt = SpyCommunicationMatrix(spec.graph, block_dim=nt)
        solver = ExtragradientSolver(
            spec, SolverConfig(max_iters=self.n_iters, record_every=5,
                               step_size=STEP_RULE), W=W, Wt=Wt)
        solver.run()
        self.assertEqual(W.call_count + Wt.call_count, 8 * self.n_iters)
        edges = set(spec.graph.edges)
        for i, j in W.reads + Wt.reads:
            self.assertTrue(i == j or (min(i, j), max(i, j)) in edges)
        # four applications of W per iteration, each reading every stored
        # entry of the base matrix once
        entries = spec.l + 2 * len(edges)
        self.assertEqual(len(W.reads), 4 * self.n_iters * entries)

    def test_fiveTopologies(self):
        for seed, (n_agents, p) in enumerate([(2, 1.), (3, 0.3), (4, 0.5),
                                              (5, 0.4), (6, 0.8)]):
            spec = random_instance(seed, n_agents=n_agents)
            graph = random_connected_graph(n_agents, p=p, seed=seed)
            spec = ProblemSpec(spec.agents, spec.shared, graph,
                               name=spec.name)
            with self.subTest(n_agents=n_agents):
                self._audit(spec)


@pytest.mark.slow
class TestDcOpf(unittest.TestCase):

    n_iters = 1000000

    def _solve(self, name):
        inst = resolve_instance(name)[0]
        spec = to_problem_spec(inst)
        oracle = solve_centralized(spec)
        config = SolverConfig(max_iters=self.n_iters, record_every=100000,
                              step_size=STEP_RULE)
        output = run(spec, config)
        return inst, spec, oracle, output

    def test_syntheticMatchesOracle(self):
        inst, spec, oracle, output = self._solve('sixbus_synthetic')
        _close_to_oracle(self, spec, output, oracle)
        report = interpret(inst, output)
        dispatch = [d['p'] for d in report['dispatch']]
        np.testing.assert_allclose(dispatch, [130., 180.], rtol=1e-2)
        prices = [p['price'] for p in report['prices']]
        np.testing.assert_allclose(prices, 13.6, rtol=1e-2)

    def test_externalSixBus(self):
        try:
            data_path('sixbus')
        except FileNotFoundError:
            self.skipTest('external six-bus instance not available')
        inst, spec, oracle, output = self._solve('sixbus')
        for solution in (oracle, output):
            report = interpret(inst, solution)
            dispatch = [d['p'] for d in report['dispatch']]
            np.testing.assert_allclose(dispatch, [110., 200.], rtol=1e-2)
            np.testing.assert_allclose(report['total_generation'],
                                       report['total_demand'], atol=1e-3)
