import logging

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.sparse


logger = logging.getLogger(__name__)

_PSD_TOLERANCE = 1e-9
_RANK_TOLERANCE = 1e-9


class DisconnectedGraphError(ValueError):
    """ The communication graph is not connected. """


class Graph(object):
    """
    Undirected communication graph over the agents 0, ..., l-1.

    Connectivity is recorded, not enforced, so that instances with a
    disconnected graph can still be built and reported on by `validate`;
    the Laplacian of a disconnected graph cannot be formed.

    :param node_count: number of agents (at least 2)
    :param edges: iterable of node pairs (i, j)
    """

    def __init__(self, node_count, edges=()):
        node_count = int(node_count)
        if node_count < 2:
            raise ValueError('At least two agents are required, '
                             'got {}'.format(node_count))
        pairs = set()
        for edge in edges:
            i, j = (int(e) for e in edge)
            if i == j:
                raise ValueError('Self-loop on node {}'.format(i))
            for node in (i, j):
                if not 0 <= node < node_count:
                    raise ValueError('Node index {} out of range '
                                     '[0, {})'.format(node, node_count))
            pairs.add((min(i, j), max(i, j)))

        self._graph = nx.Graph()
        self._graph.add_nodes_from(range(node_count))
        self._graph.add_edges_from(sorted(pairs))
        self.node_count = node_count
        self.edges = tuple(sorted(pairs))
        self.is_connected = nx.is_connected(self._graph)

    @classmethod
    def from_edges(cls, node_count, edges):
        return cls(node_count, edges)

    @classmethod
    def from_dict(cls, record):
        return cls(record['nodes'], [tuple(e) for e in record['edges']])

    def to_dict(self):
        return {'nodes': self.node_count,
                'edges': [list(e) for e in self.edges]}

    def to_networkx(self):
        return self._graph.copy()

    def neighbors(self, i):
        """ Neighbors of node i in ascending order. """
        return sorted(self._graph.neighbors(i))

    def degree(self, i):
        return self._graph.degree(i)

    def __eq__(self, other):
        return (isinstance(other, Graph)
                and self.node_count == other.node_count
                and self.edges == other.edges)

    def __repr__(self):
        return 'Graph(node_count={}, edges={})'.format(self.node_count,
                                                       list(self.edges))


class CommunicationMatrix(object):
    """
    Laplacian-like matrix W of the communication graph together with the
    block size d of its Kronecker lift W x I_d.

    :param graph: Graph instance
    :param base: symmetric l x l matrix (defaults to the graph Laplacian)
    :param block_dim: size d of the per-agent blocks
    """

    def __init__(self, graph, base=None, block_dim=1):
        if not graph.is_connected:
            raise DisconnectedGraphError('The communication graph is not '
                                         'connected: {}'.format(graph))
        if base is None:
            base = nx.laplacian_matrix(graph.to_networkx(),
                                       nodelist=list(range(graph.node_count)),
                                       weight=None).toarray()
        base = np.array(base, dtype=float)
        block_dim = int(block_dim)
        if block_dim < 0:
            raise ValueError('Block size should be non-negative')
        self.graph = graph
        self.base = base
        self.block_dim = block_dim
        self.call_count = 0
        violations = self.check()
        if violations:
            raise ValueError('Invalid communication matrix: '
                             '{}'.format('; '.join(violations)))
        self.base.setflags(write=False)
        # CSR keeps only the nonzero entries, i.e. the neighbor exchanges
        self._sparse_base = scipy.sparse.csr_matrix(self.base)
        self._sparse_base.sort_indices()
        self._spectrum = None

    def check(self):
        """ List the violated properties of the matrix (empty if valid). """
        violations = []
        base, l = self.base, self.graph.node_count
        if base.shape != (l, l):
            return ['matrix shape {} does not match {} '
                    'nodes'.format(base.shape, l)]
        if not np.allclose(base, base.T, rtol=0., atol=1e-12):
            violations.append('matrix is not symmetric')
        mask = ~np.eye(l, dtype=bool)
        for i, j in self.graph.edges:
            mask[i, j] = mask[j, i] = False
        if np.any(base[mask] != 0.):
            violations.append('nonzero entries outside the graph edges')
        eigvals = scipy.linalg.eigvalsh(base)
        if eigvals[0] < -_PSD_TOLERANCE * max(eigvals[-1], 1.):
            violations.append('matrix is not positive semidefinite')
        if not np.allclose(base.sum(axis=1), 0., atol=1e-12):
            violations.append('constant vectors are not in the kernel')
        return violations

    def exchange(self, blocks):
        """
        Combine the agent blocks (rows of an l x d array) along the graph
        edges: row i of the result is sum_j W_ij blocks_j.
        """
        return np.asarray(self._sparse_base @ blocks)

    def lift(self, block_dim):
        """ Same base matrix with another block size. """
        return CommunicationMatrix(self.graph, self.base, block_dim)

    def dense_lift(self):
        """ Explicit W x I_d. """
        return np.kron(self.base, np.eye(self.block_dim))

    def spectral(self):
        """
        Largest and smallest positive eigenvalue of the base matrix, which
        are also those of any lift.
        """
        if self._spectrum is None:
            eigvals = scipy.linalg.eigvalsh(self.base)
            lambda_max = eigvals[-1]
            positive = eigvals[eigvals > _RANK_TOLERANCE * lambda_max]
            if len(positive) != self.graph.node_count - 1:
                raise DisconnectedGraphError(
                    'Kernel of dimension {} found, the graph should be '
                    'connected'.format(len(eigvals) - len(positive)))
            self._spectrum = {'lambda_max': float(lambda_max),
                              'lambda_min_pos': float(positive[0])}
        return dict(self._spectrum)

    @property
    def size(self):
        return self.graph.node_count * self.block_dim


def laplacian(graph):
    """
    Unweighted graph Laplacian: deg(i) on the diagonal, -1 for the edges.

    :param graph: connected Graph
    :return: CommunicationMatrix with block size 1
    """
    return CommunicationMatrix(graph, block_dim=1)


def lifted_matvec(matrix, v):
    """
    Apply W x I_d to a stacked vector of l blocks of length d. Every output
    block only gathers the blocks of the nodes it exchanges with (stored
    nonzeros of the row, in ascending node order); this is one
    communication round.

    :param matrix: CommunicationMatrix
    :param v: vector of length l*d
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (matrix.size,):
        raise ValueError('Vector of length {} expected, got shape '
                         '{}'.format(matrix.size, v.shape))
    matrix.call_count += 1
    if matrix.block_dim == 0:
        return np.zeros(0)
    blocks = v.reshape(matrix.graph.node_count, matrix.block_dim)
    return matrix.exchange(blocks).ravel()


def spectral(matrix):
    return matrix.spectral()


def matrix_stats(a):
    """
    Largest and smallest positive singular value of a matrix and their ratio.

    :param a: dense matrix, not identically zero
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0 or not np.any(a):
        raise ValueError('Singular values of a zero matrix are not defined')
    sigma = scipy.linalg.svdvals(a)
    sigma_max = sigma[0]
    tol = sigma_max * max(a.shape) * np.finfo(float).eps
    sigma_min_pos = sigma[sigma > tol][-1]
    return {'sigma_max': float(sigma_max),
            'sigma_min_pos': float(sigma_min_pos),
            'chi': float(sigma_max / sigma_min_pos)}


def random_connected_graph(node_count, p=0.5, seed=0, max_attempts=1000):
    """
    Erdos-Renyi graph drawn until connected.

    :param node_count: number of nodes
    :param p: edge probability
    :param seed: random seed
    :param max_attempts: number of draws before giving up
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        g = nx.gnp_random_graph(node_count, p,
                                seed=int(rng.integers(2**31 - 1)))
        if nx.is_connected(g):
            return Graph(node_count, g.edges())
    raise RuntimeError('No connected graph drawn in {} attempts '
                       '(p={})'.format(max_attempts, p))
