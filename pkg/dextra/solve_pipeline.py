import datetime
import logging
import pathlib

from dextra.dcopf import PerUnitBase, interpret
from dextra.instances import as_problem_spec, resolve_instance, write_instance
from dextra.oracle import DEFAULT_ENUM_CAP, solve_centralized
from dextra.pipeline import Pipeline
from dextra.solver import ExtragradientSolver, SolverConfig, residual_sum
from dextra.utils import (check_dir_exists, file_digest,
                          get_args_from_configfile, to_builtin, write_json)


logger = logging.getLogger(__name__)


def _timestamp():
    return datetime.datetime.now().isoformat(timespec='seconds')


class RunManifest(object):
    """
    Record of a solver run: instance file and its SHA-256 digest, solver
    configuration, constants snapshot, timestamps and output paths.
    """

    def __init__(self, instance_path, config, constants, timestamps, outputs,
                 digest):
        self.instance_path = str(instance_path)
        self.config = config
        self.constants = constants
        self.timestamps = timestamps
        self.outputs = outputs
        self.digest = digest

    @classmethod
    def create(cls, instance_path, config, constants, timestamps, outputs):
        return cls(instance_path, config, constants, timestamps, outputs,
                   file_digest(instance_path))

    def verify(self):
        """ True if the instance file still matches the recorded digest. """
        return file_digest(self.instance_path) == self.digest

    def to_dict(self):
        return {'instance_path': self.instance_path,
                'config': to_builtin(self.config),
                'constants': to_builtin(self.constants),
                'timestamps': dict(self.timestamps),
                'outputs': {k: str(v) for k, v in self.outputs.items()},
                'digest': self.digest}

    @classmethod
    def from_dict(cls, record):
        return cls(record['instance_path'], record['config'],
                   record['constants'], record['timestamps'],
                   record['outputs'], record['digest'])

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(get_args_from_configfile(path))

    def write(self, path):
        write_json(path, self.to_dict())


class SolvePipeline(Pipeline):
    """
    Solve an instance with the decentralized extragradient method and write
    the run artifacts (trace, report, constants, manifest).

    Example:
        >>> pipeline = SolvePipeline()
        >>> pipeline.config(from_dict={
        ...     'load_instance': {'instance': 'tiny2'},
        ...     'setup_output': {'out_dir': '/tmp/tiny2'},
        ...     'configure_solver': {'max_iters': 1000},
        ...     'solve': {},
        ...     'export_trace': {},
        ...     'export_report': {}})
        >>> pipeline.run()
    """

    def __init__(self, label=None):
        self.pipeline = ('load_instance',
                         'setup_output',
                         'run_oracle',
                         'configure_solver',
                         'solve',
                         'export_trace',
                         'export_report',
                         'export_constants',
                         'write_manifest')
        if label is not None:
            self.label = label
        self.instance = None
        self.instance_path = None
        self.spec = None
        self.dcopf = None
        self.base = None
        self.output_folder = None
        self.oracle = None
        self.solver_config = SolverConfig()
        self.output = None
        self.outputs = {}
        self.timestamps = {}
        self.summary = {}

    def load_instance(self, instance, pin_slack=False, scaling='auto'):
        """
        Load a named instance (tiny2, sixbus_synthetic, sixbus,
        random_seed<k>) or an instance file.

        :param instance: instance name or path
        :param pin_slack: fix the phase angle of the first bus to zero
        (DC-OPF instances)
        :param scaling: units of the DC-OPF variables, 'auto' (per unit) or
        'none' (MW, rad and $)
        """
        self.instance, self.instance_path = resolve_instance(instance)
        self.spec, self.dcopf = as_problem_spec(self.instance, pin_slack,
                                                scaling)
        if self.dcopf is not None:
            self.base = PerUnitBase.from_dict(self.spec.metadata['base'])
        self.timestamps['loaded'] = _timestamp()
        logger.info('Instance {} loaded: {} agents, {} private and {} shared '
                    'variables'.format(self.spec.name, self.spec.l,
                                       self.spec.n, self.spec.nt))
        return self

    def setup_output(self, out_dir=None):
        """
        Create the output directory and start logging to file there.
        Generated instances are written to the directory, so that every run
        refers to an instance file.

        :param out_dir: output directory, default ./runs/<name>-<timestamp>
        """
        if out_dir is None:
            name = self.spec.name if self.spec is not None else self.label
            stamp = datetime.datetime.now().strftime('%Y%m%d-%H%M%S')
            out_dir = pathlib.Path('runs').joinpath(
                '{}-{}'.format(name, stamp))
        self.output_folder = pathlib.Path(out_dir)
        check_dir_exists(self.output_folder, should_exist=True, mkdir=True)
        logger.info('Output dir set to {}'.format(self.output_folder))
        if self.logger is not None:
            self.logger.start_log_to_file(
                directory=self.output_folder.as_posix())
            self.outputs['log'] = self.logger.log_file
        if self.instance is not None and self.instance_path is None:
            self.instance_path = self.output_folder.joinpath('instance.json')
            write_instance(self.instance, self.instance_path)
        return self

    def run_oracle(self, method='auto', enum_cap=DEFAULT_ENUM_CAP):
        """
        Solve the instance centrally, for comparison and for the
        duality-gap surrogate.

        :param method: see `dextra.oracle.solve_centralized`
        :param enum_cap: largest number of active sets enumerated by the
        'auto' method, cvxpy is used beyond
        """
        self.oracle = solve_centralized(self.spec, method=method,
                                        enum_cap=int(enum_cap))
        return self

    def configure_solver(self, use_oracle=True, **kwargs):
        """
        Set the solver configuration.

        :param use_oracle: use the oracle solution (if available) as
        comparator for the duality-gap surrogate
        :param kwargs: arguments of `dextra.solver.SolverConfig`
        """
        comparator = self.oracle if use_oracle else None
        self.solver_config = SolverConfig(comparator=comparator, **kwargs)
        return self

    def solve(self):
        self.timestamps['solve_start'] = _timestamp()
        solver = ExtragradientSolver(self.spec, self.solver_config)
        self.output = solver.run()
        self.timestamps['solve_end'] = _timestamp()
        final = self.output.trace.last()
        self.summary = {'instance': self.spec.name,
                        'iterations': self.output.iterations,
                        'objective': final['objective'],
                        'residual_sum': residual_sum(final),
                        'step_size': self.output.step_size}
        if self.oracle is not None:
            self.summary['objective_gap'] = self.objective_gap()
        return self

    def objective_gap(self):
        """ |trace-final objective - oracle objective| """
        final = self.output.trace.last()
        return float(abs(final['objective'] - self.oracle.objective))

    def _output_path(self, filename):
        if self.output_folder is None:
            raise ValueError('Output directory not set, run setup_output '
                             'first')
        return self.output_folder.joinpath(filename)

    def export_trace(self, filename='trace.csv'):
        path = self._output_path(filename)
        self.output.trace.write(path)
        self.outputs['trace'] = path
        logger.info('Trace written to {}'.format(path))
        return self

    def report(self):
        """ Final-iterate report of the run as a dictionary. """
        output = self.output
        averages, last = output.averages, output.last
        report = {'instance': self.spec.name,
                  'iterations': output.iterations,
                  'step_size': output.step_size,
                  'halvings': output.halvings,
                  'stopped_early': output.stopped_early,
                  'final': output.trace.last(),
                  'average': {name: getattr(averages, name)
                              for name in ('x', 'xt', 'y', 'yt', 'z', 'zt')},
                  'average_xt_mean': averages.xt_mean(),
                  'last': {name: getattr(last, name)
                           for name in ('x', 'xt', 'y', 'yt', 'z', 'zt')},
                  'bounds': output.bound_report,
                  'capped_constants': list(output.constants.capped)}
        if self.oracle is not None:
            report['oracle'] = self.oracle.to_dict()
            report['objective_gap'] = self.objective_gap()
        if self.dcopf is not None:
            report['power'] = interpret(self.dcopf, output, self.base)
            if self.oracle is not None:
                report['oracle_power'] = interpret(self.dcopf, self.oracle,
                                                   self.base)
        return to_builtin(report)

    def export_report(self, filename='report.json'):
        path = self._output_path(filename)
        write_json(path, self.report())
        self.outputs['report'] = path
        logger.info('Report written to {}'.format(path))
        return self

    def export_constants(self, filename='constants.json'):
        path = self._output_path(filename)
        record = self.output.constants.to_dict()
        record['step_size_used'] = self.output.step_size
        write_json(path, to_builtin(record))
        self.outputs['constants'] = path
        return self

    def write_manifest(self, filename='manifest.json'):
        path = self._output_path(filename)
        self.outputs['manifest'] = path
        self.timestamps['written'] = _timestamp()
        manifest = RunManifest.create(self.instance_path,
                                      self.solver_config.to_dict(),
                                      self.output.constants.to_dict(),
                                      self.timestamps, self.outputs)
        manifest.write(path)
        logger.info('Manifest written to {}'.format(path))
        return self


def build_solve_input(instance, iters=100000, step='auto', record_every=100,
                      seed=0, tolerance=0., with_oracle=False, pin_slack=False,
                      out_dir=None, scaling='auto', init='midpoint',
                      adaptive=False, oracle_method='auto',
                      oracle_cap=DEFAULT_ENUM_CAP, log_level=None):
    """
    Input dictionary of a SolvePipeline running every task, from the
    command-line options of `dextra solve`.
    """
    if isinstance(step, str):
        try:
            step = float(step)
        except ValueError:
            pass
    pipeline_input = {
        'load_instance': {'instance': str(instance), 'pin_slack': pin_slack,
                          'scaling': scaling},
        'setup_output': {'out_dir': out_dir},
        'configure_solver': {'max_iters': iters, 'step_size': step,
                             'record_every': record_every, 'seed': seed,
                             'tolerance': tolerance, 'init': init,
                             'adaptive': adaptive},
        'solve': {},
        'export_trace': {},
        'export_report': {},
        'export_constants': {},
        'write_manifest': {}}
    if with_oracle:
        pipeline_input['run_oracle'] = {'method': oracle_method,
                                     'enum_cap': oracle_cap}
    if log_level is not None:
        pipeline_input['log_config'] = {'level': log_level}
    return pipeline_input

