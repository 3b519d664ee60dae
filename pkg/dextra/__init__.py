__license__ = 'Apache Licence 2.0'
__author__ = 'Netherlands eScience Center'
__email__ = 'team-atlas@esciencecenter.nl'

from .__version__ import __version__

from dextra.problem import ProblemSpec
from dextra.graph import Graph, CommunicationMatrix
from dextra.solver import ExtragradientSolver, SolverConfig
from dextra.oracle import solve_centralized
from dextra.dcopf import DcOpfInstance
from dextra.solve_pipeline import SolvePipeline

from dextra.macro_pipeline import MacroPipeline
