import logging

import networkx as nx
import numpy as np

from dextra.graph import Graph
from dextra.problem import (BoxSet, DimensionError, InvalidInstanceError,
                            LocalBlock, ProblemSpec, QuadraticObjective,
                            SharedBlock)


logger = logging.getLogger(__name__)


class Bus(object):
    """
    :param id: bus identifier
    :param demand: load p^D in MW
    :param theta_max: bound on the voltage angle (rad)
    """

    def __init__(self, id, demand, theta_max):
        self.id = int(id)
        self.demand = float(demand)
        self.theta_max = float(theta_max)

    def to_dict(self):
        return {'id': self.id, 'demand': self.demand,
                'theta_max': self.theta_max}


class Generator(object):
    """
    :param bus: id of the bus the generator is connected to
    :param p_min: minimal generation (MW)
    :param p_max: maximal generation (MW)
    :param cost: coefficients (c2, c1, c0) of c2 p^2 + c1 p + c0
    """

    def __init__(self, bus, p_min, p_max, cost):
        self.bus = int(bus)
        self.p_min = float(p_min)
        self.p_max = float(p_max)
        cost = [float(c) for c in cost]
        if len(cost) != 3:
            raise InvalidInstanceError('Cost should have three coefficients '
                                       '(c2, c1, c0), got {}'.format(cost))
        self.cost = tuple(cost)

    def to_dict(self):
        return {'bus': self.bus, 'p_min': self.p_min, 'p_max': self.p_max,
                'cost': list(self.cost)}

    def cost_of(self, p):
        c2, c1, c0 = self.cost
        return c2 * p**2 + c1 * p + c0


class Line(object):
    """
    :param from_bus: id of the first end
    :param to_bus: id of the second end
    :param susceptance: B (MW/rad), flow = B (theta_from - theta_to)
    :param f_max: flow limit (MW)
    """

    def __init__(self, from_bus, to_bus, susceptance, f_max):
        self.from_bus = int(from_bus)
        self.to_bus = int(to_bus)
        self.susceptance = float(susceptance)
        self.f_max = float(f_max)

    def to_dict(self):
        return {'from': self.from_bus, 'to': self.to_bus,
                'susceptance': self.susceptance, 'f_max': self.f_max}


class DcOpfInstance(object):
    """ DC optimal power flow instance: buses, generators and lines. """

    def __init__(self, buses, generators, lines, name='dcopf'):
        self.buses = list(buses)
        self.generators = list(generators)
        self.lines = list(lines)
        self.name = name

    @classmethod
    def from_dict(cls, record, name='dcopf'):
        try:
            buses = [Bus(b['id'], b['demand'], b['theta_max'])
                     for b in record['buses']]
            generators = [Generator(g['bus'], g['p_min'], g['p_max'],
                                    g['cost'])
                          for g in record.get('generators', [])]
            lines = [Line(ln['from'], ln['to'], ln['susceptance'],
                          ln['f_max'])
                     for ln in record.get('lines', [])]
        except InvalidInstanceError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInstanceError('Malformed DC-OPF instance: '
                                       '{}: {}'.format(type(exc).__name__,
                                                       exc))
        return cls(buses, generators, lines, record.get('name', name))

    def to_dict(self):
        return {'name': self.name,
                'buses': [b.to_dict() for b in self.buses],
                'generators': [g.to_dict() for g in self.generators],
                'lines': [ln.to_dict() for ln in self.lines]}

    @property
    def bus_index(self):
        return {bus.id: k for k, bus in enumerate(self.buses)}

    def generators_at(self, k):
        """ Indices of the generators connected to the k-th bus. """
        bus_id = self.buses[k].id
        return [i for i, g in enumerate(self.generators) if g.bus == bus_id]

    def susceptance_matrix(self):
        """ Symmetric matrix of the summed line susceptances B_ij. """
        index = self.bus_index
        B = np.zeros((len(self.buses), len(self.buses)))
        for line in self.lines:
            i, j = index[line.from_bus], index[line.to_bus]
            B[i, j] += line.susceptance
            B[j, i] += line.susceptance
        return B

    def graph(self):
        index = self.bus_index
        return Graph(len(self.buses), [(index[ln.from_bus], index[ln.to_bus])
                                       for ln in self.lines])

    def validate(self):
        """ List of violated invariants (empty if the instance is valid). """
        violations = []
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            violations.append('bus ids are not unique')
        if len(self.buses) < 2:
            violations.append('at least two buses are required')
        for bus in self.buses:
            if bus.demand < 0:
                violations.append('bus {}: negative demand'.format(bus.id))
            if not bus.theta_max > 0:
                violations.append('bus {}: theta_max should be '
                                  'positive'.format(bus.id))
        for n, gen in enumerate(self.generators):
            if gen.bus not in ids:
                violations.append('generator {}: unknown bus '
                                  '{}'.format(n, gen.bus))
            if gen.p_min > gen.p_max:
                violations.append('generator {}: p_min exceeds '
                                  'p_max'.format(n))
            if gen.cost[0] < 0:
                violations.append('generator {}: cost is not '
                                  'convex'.format(n))
        for n, line in enumerate(self.lines):
            if line.from_bus == line.to_bus:
                violations.append('line {}: both ends on bus '
                                  '{}'.format(n, line.from_bus))
            for end in (line.from_bus, line.to_bus):
                if end not in ids:
                    violations.append('line {}: unknown bus '
                                      '{}'.format(n, end))
            if not line.susceptance > 0:
                violations.append('line {}: susceptance should be '
                                  'positive'.format(n))
            if not line.f_max > 0:
                violations.append('line {}: f_max should be '
                                  'positive'.format(n))
        if not violations:
            g = nx.Graph()
            g.add_nodes_from(ids)
            g.add_edges_from((ln.from_bus, ln.to_bus) for ln in self.lines)
            if not nx.is_connected(g):
                violations.append('network is not connected')
        total_capacity = sum(g.p_max for g in self.generators)
        total_demand = sum(b.demand for b in self.buses)
        if total_capacity < total_demand:
            violations.append('total capacity {} MW below total demand {} '
                              'MW'.format(total_capacity, total_demand))
        return violations


class PerUnitBase(object):
    """
    Units of the DC-OPF problem variables: one power unit (MW), one angle
    unit (rad) and one cost unit ($). The problem is posed in these units
    and reports are converted back to MW, rad and $.

    :param power: MW per power unit
    :param angle: rad per angle unit
    :param cost: $ per cost unit
    """

    def __init__(self, power=1., angle=1., cost=1.):
        self.power = float(power)
        self.angle = float(angle)
        self.cost = float(cost)
        for name, value in self.to_dict().items():
            if not (np.isfinite(value) and value > 0):
                raise ValueError('Base {} should be a positive number, got '
                                 '{}'.format(name, value))

    @classmethod
    def auto(cls, inst):
        """
        Base in which generation and demand are at most one unit, the
        largest bus susceptance sum is one and marginal costs at full output
        are at most one.
        """
        power = max([g.p_max for g in inst.generators] +
                    [b.demand for b in inst.buses] + [0.])
        if not power > 0:
            power = 1.
        row_sums = inst.susceptance_matrix().sum(axis=1)
        angle = power / row_sums.max() if row_sums.max() > 0 else 1.
        marginal = max([abs(2. * g.cost[0] * g.p_max + g.cost[1])
                        for g in inst.generators] + [0.])
        cost = marginal * power if marginal > 0 else 1.
        return cls(power, angle, cost)

    @classmethod
    def from_dict(cls, record):
        return cls(record['power'], record['angle'], record['cost'])

    @classmethod
    def resolve(cls, inst, base=None):
        """ `base` if given, the automatic base of `inst` otherwise. """
        if base is None:
            return cls.auto(inst)
        if isinstance(base, dict):
            return cls.from_dict(base)
        return base

    def to_dict(self):
        return {'power': self.power, 'angle': self.angle, 'cost': self.cost}

    def __repr__(self):
        return 'PerUnitBase(power={!r}, angle={!r}, cost={!r})'.format(
            self.power, self.angle, self.cost)


SCALINGS = ('auto', 'none')


def base_for(inst, scaling='auto'):
    """
    PerUnitBase of a scaling option: 'auto' (PerUnitBase.auto) or 'none'
    (MW, rad and $).
    """
    if scaling == 'auto':
        return PerUnitBase.auto(inst)
    if scaling == 'none':
        return PerUnitBase()
    raise ValueError('Unknown scaling: {}, expected one of '
                     '{}'.format(scaling, ', '.join(SCALINGS)))


def to_problem_spec(inst, pin_slack=False, base=None):
    """
    One agent per bus with private variables (generation at the bus, bus
    angle). Row i of the coupled equalities is the power balance of bus i;
    the two coupled inequalities of a line bound its flow in both
    directions. Each agent holds exactly the coefficients of its own
    variables, so the graph of the network is the communication graph.

    :param inst: DcOpfInstance
    :param pin_slack: fix the angle of the first bus to zero
    :param base: PerUnitBase of the variables, PerUnitBase.auto(inst) if
    None; PerUnitBase() keeps MW, rad and $
    :return: ProblemSpec
    """
    violations = inst.validate()
    if violations:
        raise InvalidInstanceError('Invalid DC-OPF instance {}: '
                                   '{}'.format(inst.name,
                                               '; '.join(violations)))
    base = PerUnitBase.resolve(inst, base)
    index = inst.bus_index
    n_bus, n_line = len(inst.buses), len(inst.lines)
    # Power units per angle unit
    B = inst.susceptance_matrix() * base.angle / base.power

    agents = []
    for k, bus in enumerate(inst.buses):
        gens = [inst.generators[i] for i in inst.generators_at(k)]
        n_gen = len(gens)
        dim = n_gen + 1
        A = np.zeros((n_bus, dim))
        A[k, :n_gen] = 1.
        A[k, n_gen] = -B[k].sum()
        for j in np.flatnonzero(B[k]):
            A[j, n_gen] = B[j, k]
        b = np.zeros(n_bus)
        b[k] = bus.demand / base.power

        C = np.zeros((2 * n_line, dim))
        d = np.zeros(2 * n_line)
        for n, line in enumerate(inst.lines):
            susceptance = line.susceptance * base.angle / base.power
            sign = {index[line.from_bus]: 1., index[line.to_bus]: -1.}
            if k in sign:
                C[2*n, n_gen] = sign[k] * susceptance
                C[2*n + 1, n_gen] = -sign[k] * susceptance
            if k == index[line.from_bus]:
                d[2*n] = d[2*n + 1] = line.f_max / base.power

        Q = np.zeros((dim, dim))
        q = np.zeros(dim)
        c0 = 0.
        for i, gen in enumerate(gens):
            c2, c1, c00 = gen.cost
            Q[i, i] = 2. * c2 * base.power**2 / base.cost
            q[i] = c1 * base.power / base.cost
            c0 += c00 / base.cost
        theta = 0. if (pin_slack and k == 0) else bus.theta_max / base.angle
        lower = [g.p_min / base.power for g in gens] + [-theta]
        upper = [g.p_max / base.power for g in gens] + [theta]
        agents.append(LocalBlock(dim, QuadraticObjective(Q, q, c0), A, b, C,
                                 d, BoxSet(lower, upper)))

    metadata = {'kind': 'dcopf', 'base': base.to_dict(),
                'pin_slack': bool(pin_slack)}
    logger.debug('DC-OPF {} posed in {}'.format(inst.name, base))
    return ProblemSpec(agents, SharedBlock.empty(), inst.graph(),
                       name=inst.name, metadata=metadata)


def split_variables(inst, x, base=None):
    """
    Generation (MW, in the order of inst.generators) and angles (rad, in the
    order of inst.buses) from the stacked private vector.

    :param base: PerUnitBase the problem was built with (automatic if None)
    """
    base = PerUnitBase.resolve(inst, base)
    x = np.asarray(x, dtype=float)
    expected = len(inst.generators) + len(inst.buses)
    if x.shape != (expected,):
        raise DimensionError('Vector of length {} expected, got shape '
                             '{}'.format(expected, x.shape))
    p = np.zeros(len(inst.generators))
    theta = np.zeros(len(inst.buses))
    offset = 0
    for k in range(len(inst.buses)):
        gens = inst.generators_at(k)
        p[gens] = x[offset:offset + len(gens)] * base.power
        theta[k] = x[offset + len(gens)] * base.angle
        offset += len(gens) + 1
    return p, theta


def line_flows(inst, theta):
    """ Flows B (theta_from - theta_to) in MW. """
    index = inst.bus_index
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(inst.buses),):
        raise DimensionError('{} angles expected, got shape '
                             '{}'.format(len(inst.buses), theta.shape))
    return np.array([ln.susceptance * (theta[index[ln.from_bus]]
                                       - theta[index[ln.to_bus]])
                     for ln in inst.lines])


def dc_power_balance(inst, p, theta):
    """
    Balance residual of every bus: generation - demand - sum of the flows
    leaving the bus (MW).
    """
    index = inst.bus_index
    p = np.asarray(p, dtype=float)
    if p.shape != (len(inst.generators),):
        raise DimensionError('{} generator outputs expected, got shape '
                             '{}'.format(len(inst.generators), p.shape))
    residual = -np.array([bus.demand for bus in inst.buses])
    for gen, value in zip(inst.generators, p):
        residual[index[gen.bus]] += value
    for line, flow in zip(inst.lines, line_flows(inst, theta)):
        residual[index[line.from_bus]] -= flow
        residual[index[line.to_bus]] += flow
    return residual


def _primal_vector(output):
    if hasattr(output, 'averages'):
        return output.averages.x
    if hasattr(output, 'x_star'):
        return output.x_star
    return np.asarray(output, dtype=float)


def _balance_multipliers(inst, output):
    """
    Multipliers of the bus balance rows: y* of an oracle solution, the
    agents' mean of the averaged multipliers of a solver run.
    """
    n_bus = len(inst.buses)
    if hasattr(output, 'averages'):
        y = output.averages.y
        return y.reshape(output.averages.layout.l, -1)[:, :n_bus].mean(axis=0)
    if hasattr(output, 'y_star'):
        return output.y_star[:n_bus]
    return None


def interpret(inst, output, base=None):
    """
    Power report of a solution: dispatch, line flows with their margins,
    total cost, bus balance residuals and (when multipliers are available)
    nodal prices, in MW, rad and $.

    :param inst: DcOpfInstance
    :param output: SolverOutput (the ergodic average is used), OracleSolution
    or stacked private vector
    :param base: PerUnitBase the problem was built with (automatic if None)
    """
    base = PerUnitBase.resolve(inst, base)
    p, theta = split_variables(inst, _primal_vector(output), base)
    flows = line_flows(inst, theta)
    balance = dc_power_balance(inst, p, theta)
    report = {
        'dispatch': [{'generator': n, 'bus': g.bus, 'p': float(value)}
                     for n, (g, value) in enumerate(zip(inst.generators, p))],
        'theta': theta.tolist(),
        'flows': [{'from': ln.from_bus, 'to': ln.to_bus,
                   'flow': float(flow), 'f_max': ln.f_max,
                   'margin': float(ln.f_max - abs(flow))}
                  for ln, flow in zip(inst.lines, flows)],
        'total_cost': float(sum(g.cost_of(value)
                                for g, value in zip(inst.generators, p))),
        'total_generation': float(p.sum()),
        'total_demand': float(sum(b.demand for b in inst.buses)),
        'balance_residual': balance.tolist(),
        'base': base.to_dict()}
    multipliers = _balance_multipliers(inst, output)
    if multipliers is not None:
        # The balance rows read generation - demand, so prices are -y ($/MW)
        prices = -np.asarray(multipliers) * base.cost / base.power
        report['prices'] = [{'bus': bus.id, 'price': float(price)}
                            for bus, price in zip(inst.buses, prices)]
    return report
