import json
import logging
import os
import pathlib
import re

import numpy as np

from dextra.dcopf import DcOpfInstance, base_for, to_problem_spec
from dextra.graph import random_connected_graph
from dextra.problem import (BoxSet, InvalidInstanceError, LocalBlock,
                            ProblemSpec, QuadraticObjective, SharedBlock)
from dextra.utils import get_args_from_configfile, write_json


logger = logging.getLogger(__name__)

DATA_DIR = pathlib.Path(__file__).parent.joinpath('data')
DATA_ENV = 'DEXTRA_DATA'
BUNDLED = ('tiny2', 'sixbus_synthetic')
EXTERNAL = ('sixbus',)
_RANDOM = re.compile(r'^random_seed(\d+)$')


def parse_instance(record, name='instance'):
    """
    Build an instance from a parsed document, detecting its format from the
    top-level keys: `agents` for the problem format, `buses` for DC-OPF.

    :return: ProblemSpec or DcOpfInstance
    """
    if not isinstance(record, dict):
        raise InvalidInstanceError('Instance should be a key-value document')
    if 'agents' in record:
        instance = ProblemSpec.from_dict(record, name=name)
    elif 'buses' in record:
        instance = DcOpfInstance.from_dict(record, name=name)
    else:
        raise InvalidInstanceError('Unknown instance format, top-level keys: '
                                   '{}'.format(sorted(record)))
    violations = instance.validate()
    if violations:
        raise InvalidInstanceError('Invalid instance {}: '
                                   '{}'.format(instance.name,
                                               '; '.join(violations)))
    return instance


def load_instance(source):
    """
    Load and validate an instance from a JSON file or a dictionary.

    :param source: path or dictionary
    :return: ProblemSpec or DcOpfInstance
    """
    if isinstance(source, dict):
        return parse_instance(source)
    path = pathlib.Path(source)
    try:
        record = get_args_from_configfile(path)
    except json.JSONDecodeError as exc:
        raise InvalidInstanceError('Cannot parse {}: {}'.format(path, exc))
    except NotImplementedError:
        raise InvalidInstanceError('Instance files should be JSON documents: '
                                   '{}'.format(path))
    return parse_instance(record, name=path.stem)


def write_instance(instance, path):
    write_json(path, instance.to_dict())


def data_path(name):
    """
    Path of a named instance file, looked up in the DEXTRA_DATA directory
    first and in the bundled data directory then.
    """
    directories = []
    if os.environ.get(DATA_ENV):
        directories.append(pathlib.Path(os.environ[DATA_ENV]))
    directories.append(DATA_DIR)
    for directory in directories:
        path = directory.joinpath('{}.json'.format(name))
        if path.is_file():
            return path
    raise FileNotFoundError('Instance {} not found in {}'.format(
        name, ', '.join(str(d) for d in directories)))


def resolve_instance(name):
    """
    Named instance (tiny2, sixbus_synthetic, sixbus, random_seed<k>) or path
    of an instance file.

    :return: (instance, path of the file or None if generated)
    """
    match = _RANDOM.match(str(name))
    if match:
        return random_instance(int(match.group(1))), None
    if name in BUNDLED + EXTERNAL:
        path = data_path(name)
    else:
        path = pathlib.Path(name)
    return load_instance(path), path


def as_problem_spec(instance, pin_slack=False, scaling='auto'):
    """
    ProblemSpec of an instance, converting DC-OPF instances in the units
    given by `scaling` (see `dextra.dcopf.base_for`).

    :return: (ProblemSpec, DcOpfInstance or None)
    """
    if isinstance(instance, DcOpfInstance):
        base = base_for(instance, scaling)
        return to_problem_spec(instance, pin_slack, base), instance
    return instance, None


def random_instance(seed, n_agents=None):
    """
    Random feasible instance with convex quadratic objectives: the
    right-hand sides are built around a point of the boxes, which satisfies
    every constraint (the inequalities with some slack).

    :param seed: random seed
    :param n_agents: (optional) number of agents, random in [2, 6] otherwise
    """
    rng = np.random.default_rng(seed)
    l = int(n_agents) if n_agents is not None else int(rng.integers(2, 7))
    dims = [int(v) for v in rng.integers(1, 4, size=l)]
    n = sum(dims)
    m = int(rng.integers(1, min(3, n - 1) + 1))
    h = int(rng.integers(0, 4))
    nt = int(rng.integers(0, 3))
    mt = int(rng.integers(0, 2)) if nt >= 2 else 0
    ht = int(rng.integers(0, 2)) if nt >= 1 else 0

    def random_box(size):
        lower = rng.uniform(-3., -1., size)
        upper = rng.uniform(1., 3., size)
        point = rng.uniform(0.5 * lower, 0.5 * upper)
        return BoxSet(lower, upper), point

    shared_box, xt0 = random_box(nt)
    Atil = rng.normal(size=(mt, nt))
    Ctil = rng.normal(size=(ht, nt))
    shared = SharedBlock(nt, Atil, Atil @ xt0, Ctil,
                         Ctil @ xt0 + rng.uniform(0., 0.5, ht), shared_box)

    agents = []
    for dim in dims:
        box, x0 = random_box(dim)
        A = rng.normal(size=(m, dim))
        C = rng.normal(size=(h, dim))
        size = dim + nt
        M = rng.normal(size=(size, size))
        Q = M @ M.T / size + 0.1 * np.eye(size)
        q = rng.normal(size=size)
        agents.append(LocalBlock(dim, QuadraticObjective(Q, q), A, A @ x0, C,
                                 C @ x0 + rng.uniform(0., 0.5, h) / l, box))

    graph = random_connected_graph(l, p=0.5, seed=seed)
    return ProblemSpec(agents, shared, graph,
                       name='random_seed{}'.format(seed))
