import unittest

import numpy as np

from dextra.dcopf import Bus, DcOpfInstance, Generator, Line, PerUnitBase, \
    base_for, dc_power_balance, interpret, line_flows, split_variables, \
    to_problem_spec
from dextra.instances import resolve_instance
from dextra.oracle import solve_centralized
from dextra.problem import DimensionError, InvalidInstanceError, \
    centralized_objective, coupled_residuals
from dextra.solver import SolverConfig, run


def two_bus_instance(f_max=100.):
    """ Cheap generator at bus 0, expensive one at bus 1, 150 MW at bus 1. """
    return DcOpfInstance(
        [Bus(0, 0., 1.), Bus(1, 150., 1.)],
        [Generator(0, 0., 200., (0.01, 10., 0.)),
         Generator(1, 0., 200., (0.01, 20., 0.))],
        [Line(0, 1, 100., f_max)], name='twobus')


class TestDcOpfInstance(unittest.TestCase):

    def setUp(self):
        self.inst = resolve_instance('sixbus_synthetic')[0]

    def test_bundledInstanceIsValid(self):
        self.assertEqual(self.inst.validate(), [])
        self.assertEqual(len(self.inst.buses), 6)
        self.assertEqual(len(self.inst.lines), 11)

    def test_dictRoundTrip(self):
        record = self.inst.to_dict()
        self.assertDictEqual(DcOpfInstance.from_dict(record).to_dict(),
                             record)

    def test_generatorsAt(self):
        self.assertEqual(self.inst.generators_at(0), [0])
        self.assertEqual(self.inst.generators_at(3), [])

    def test_susceptanceMatrix(self):
        B = self.inst.susceptance_matrix()
        np.testing.assert_allclose(B, B.T)
        np.testing.assert_array_equal(np.diag(B), 0.)
        self.assertTrue(np.all(B >= 0.))
        self.assertAlmostEqual(B[1].sum(), 5300.)
        self.assertAlmostEqual(B.sum(), 2. * 11500.)

    def test_graphFollowsLines(self):
        self.assertEqual(len(self.inst.graph().edges), 11)
        self.assertTrue(self.inst.graph().is_connected)

    def test_validateReportsProblems(self):
        inst = DcOpfInstance(
            [Bus(0, -1., 1.), Bus(1, 10., 0.)],
            [Generator(5, 0., 1., (0., 1., 0.))],
            [Line(0, 0, -1., 10.)])
        violations = inst.validate()
        self.assertTrue(any('negative demand' in v for v in violations))
        self.assertTrue(any('theta_max' in v for v in violations))
        self.assertTrue(any('unknown bus' in v for v in violations))
        self.assertTrue(any('susceptance' in v for v in violations))
        self.assertTrue(any('below total demand' in v for v in violations))

    def test_disconnectedNetwork(self):
        inst = DcOpfInstance(
            [Bus(0, 0., 1.), Bus(1, 1., 1.), Bus(2, 1., 1.)],
            [Generator(0, 0., 10., (0., 1., 0.))],
            [Line(0, 1, 10., 10.)])
        self.assertIn('network is not connected', inst.validate())

    def test_invalidInstanceNotConverted(self):
        inst = DcOpfInstance([Bus(0, 10., 1.), Bus(1, 0., 1.)],
                             [Generator(0, 0., 1., (0., 1., 0.))],
                             [Line(0, 1, 10., 10.)])
        with self.assertRaises(InvalidInstanceError):
            to_problem_spec(inst)


class TestPerUnitBase(unittest.TestCase):

    def setUp(self):
        self.inst = resolve_instance('sixbus_synthetic')[0]

    def test_automaticBase(self):
        base = PerUnitBase.auto(self.inst)
        self.assertAlmostEqual(base.power, 250.)
        self.assertAlmostEqual(base.angle, 250. / 5300.)
        # marginal cost 0.02 * 250 + 11 at full output of generator 0
        self.assertAlmostEqual(base.cost, 16. * 250.)

    def test_defaultIsPhysicalUnits(self):
        self.assertDictEqual(PerUnitBase().to_dict(),
                             {'power': 1., 'angle': 1., 'cost': 1.})

    def test_nonPositiveBase(self):
        with self.assertRaises(ValueError):
            PerUnitBase(power=0.)
        with self.assertRaises(ValueError):
            PerUnitBase(cost=-1.)

    def test_scalingOption(self):
        self.assertDictEqual(base_for(self.inst, 'none').to_dict(),
                             PerUnitBase().to_dict())
        self.assertDictEqual(base_for(self.inst, 'auto').to_dict(),
                             PerUnitBase.auto(self.inst).to_dict())
        with self.assertRaises(ValueError):
            base_for(self.inst, 'pu')

    def test_costFreeInstance(self):
        inst = DcOpfInstance([Bus(0, 0., 1.), Bus(1, 0., 1.)],
                             [Generator(0, 0., 0., (0., 0., 0.))],
                             [Line(0, 1, 10., 10.)])
        base = PerUnitBase.auto(inst)
        self.assertEqual((base.power, base.cost), (1., 1.))
        self.assertAlmostEqual(base.angle, 0.1)

    def test_scaledCoefficientsAreOrderOne(self):
        spec = to_problem_spec(self.inst)
        for agent in spec.agents:
            self.assertLessEqual(np.abs(agent.A).max(), 1. + 1e-12)
            self.assertLessEqual(np.abs(agent.objective.q).max(), 1.)
            self.assertLessEqual(np.abs(agent.b).max(), 1.)


class TestToProblemSpec(unittest.TestCase):

    def setUp(self):
        self.inst = resolve_instance('sixbus_synthetic')[0]
        self.spec = to_problem_spec(self.inst)
        self.base = PerUnitBase.auto(self.inst)

    def test_oneAgentPerBus(self):
        self.assertEqual(self.spec.l, 6)
        self.assertEqual(self.spec.dims, [2, 2, 1, 1, 1, 1])
        self.assertEqual(self.spec.m, 6)
        self.assertEqual(self.spec.h, 22)
        self.assertEqual(self.spec.nt, 0)
        self.assertEqual(self.spec.validate(), [])
        self.assertDictEqual(self.spec.metadata['base'], self.base.to_dict())

    def test_objectiveIsGenerationCost(self):
        spec = to_problem_spec(self.inst, base=PerUnitBase())
        x = spec.box.midpoint()
        x[[0, 2]] = [130., 180.]
        self.assertAlmostEqual(centralized_objective(spec, x, np.zeros(0)),
                               3723.)

    def test_scaledObjectiveIsCostInCostUnits(self):
        x = self.spec.box.midpoint()
        x[[0, 2]] = np.array([130., 180.]) / self.base.power
        self.assertAlmostEqual(centralized_objective(self.spec, x,
                                                     np.zeros(0)),
                               3723. / self.base.cost)

    def test_balanceRowsMatchPhysics(self):
        rng = np.random.default_rng(0)
        for base in (PerUnitBase(), self.base, PerUnitBase(100., 0.01, 50.)):
            spec = to_problem_spec(self.inst, base=base)
            x = spec.box.sample(rng)
            eq, ineq, _, _ = coupled_residuals(spec, x, np.zeros(0))
            p, theta = split_variables(self.inst, x, base)
            np.testing.assert_allclose(
                eq * base.power, dc_power_balance(self.inst, p, theta),
                atol=1e-8 * base.power)
            flows = line_flows(self.inst, theta)
            expected = np.ravel(np.column_stack([flows - 350.,
                                                 -flows - 350.]))
            np.testing.assert_allclose(ineq * base.power, expected,
                                       atol=1e-8 * base.power)

    def test_boxesInBaseUnits(self):
        agent = self.spec.agents[0]
        np.testing.assert_allclose(agent.box.lower,
                                   [10. / 250., -5300. / 250.])
        np.testing.assert_allclose(agent.box.upper,
                                   [250. / 250., 5300. / 250.])

    def test_coefficientsOnlyOnIncidentRows(self):
        index = self.inst.bus_index
        for k, agent in enumerate(self.spec.agents):
            local = {k} | set(self.spec.graph.neighbors(k))
            self.assertTrue(set(np.flatnonzero(np.any(agent.A, axis=1)))
                            <= local)
            # the angle column reaches every neighbour's balance row
            angle = agent.A[:, -1]
            self.assertEqual(set(np.flatnonzero(angle)), local)
            self.assertAlmostEqual(angle.sum(), 0.)
            incident = set()
            for n, line in enumerate(self.inst.lines):
                if k in (index[line.from_bus], index[line.to_bus]):
                    incident |= {2 * n, 2 * n + 1}
            self.assertEqual(set(np.flatnonzero(np.any(agent.C, axis=1))),
                             incident)
            self.assertTrue(set(np.flatnonzero(agent.b)) <= {k})

    def test_pinSlack(self):
        spec = to_problem_spec(self.inst, pin_slack=True)
        self.assertEqual(spec.agents[0].box.upper[-1], 0.)
        self.assertEqual(spec.agents[0].box.lower[-1], 0.)
        self.assertTrue(spec.metadata['pin_slack'])

    def test_splitVariablesConvertsUnits(self):
        x = np.arange(8.)
        p, theta = split_variables(self.inst, x, self.base)
        np.testing.assert_allclose(p, [0., 2. * 250.])
        np.testing.assert_allclose(theta,
                                   np.array([1., 3., 4., 5., 6., 7.])
                                   * 250. / 5300.)

    def test_splitVariablesWrongLength(self):
        with self.assertRaises(DimensionError):
            split_variables(self.inst, np.zeros(7))


class TestDispatch(unittest.TestCase):

    def test_sixBusEconomicDispatch(self):
        inst = resolve_instance('sixbus_synthetic')[0]
        spec = to_problem_spec(inst)
        solution = solve_centralized(spec)
        report = interpret(inst, solution)
        dispatch = [d['p'] for d in report['dispatch']]
        np.testing.assert_allclose(dispatch, [130., 180.], atol=1e-4)
        np.testing.assert_allclose(report['total_cost'], 3723., atol=1e-2)
        np.testing.assert_allclose(report['balance_residual'], 0., atol=1e-6)
        # uncongested network: one price, the common marginal cost
        prices = [p['price'] for p in report['prices']]
        np.testing.assert_allclose(prices, 13.6, atol=1e-5)
        for flow in report['flows']:
            self.assertGreaterEqual(flow['margin'], -1e-6)

    def test_pricesIndependentOfBase(self):
        inst = resolve_instance('sixbus_synthetic')[0]
        raw = solve_centralized(to_problem_spec(inst, base=PerUnitBase()))
        np.testing.assert_allclose(raw.y_star[:6], -13.6, atol=1e-5)
        report = interpret(inst, raw, PerUnitBase())
        np.testing.assert_allclose([p['price'] for p in report['prices']],
                                   13.6, atol=1e-5)
        self.assertDictEqual(report['base'], PerUnitBase().to_dict())

    def test_congestedLine(self):
        inst = two_bus_instance(f_max=100.)
        solution = solve_centralized(to_problem_spec(inst))
        report = interpret(inst, solution)
        dispatch = [d['p'] for d in report['dispatch']]
        # the line limit forces the expensive unit to cover 50 MW
        np.testing.assert_allclose(dispatch, [100., 50.], atol=1e-5)
        np.testing.assert_allclose(report['flows'][0]['flow'], 100.,
                                   atol=1e-5)
        np.testing.assert_allclose(report['flows'][0]['margin'], 0.,
                                   atol=1e-5)
        # nodal prices are the marginal costs on each side of the line
        prices = [p['price'] for p in report['prices']]
        np.testing.assert_allclose(prices, [12., 21.], atol=1e-4)

    def test_uncongestedLine(self):
        inst = two_bus_instance(f_max=1000.)
        solution = solve_centralized(to_problem_spec(inst))
        dispatch = [d['p'] for d in interpret(inst, solution)['dispatch']]
        np.testing.assert_allclose(dispatch, [150., 0.], atol=1e-5)

    def test_interpretSolverOutput(self):
        inst = two_bus_instance(f_max=1000.)
        spec = to_problem_spec(inst)
        output = run(spec, SolverConfig(max_iters=10, step_size='lipschitz'))
        report = interpret(inst, output)
        self.assertEqual(len(report['dispatch']), 2)
        self.assertEqual(report['total_demand'], 150.)
        p, _ = split_variables(inst, output.averages.x)
        np.testing.assert_allclose(report['total_generation'], p.sum())
        self.assertEqual(len(report['prices']), 2)

    def test_interpretPrimalVector(self):
        inst = two_bus_instance(f_max=1000.)
        report = interpret(inst, np.array([0.5, 0., 0.5, 0.]),
                           PerUnitBase(power=100.))
        self.assertAlmostEqual(report['total_generation'], 100.)
        self.assertNotIn('prices', report)
