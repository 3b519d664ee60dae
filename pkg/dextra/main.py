import functools
import logging
import pathlib
import sys

import fire
import pandas as pd

from dextra.graph import laplacian
from dextra.instances import as_problem_spec, resolve_instance
from dextra.macro_pipeline import MacroPipeline
from dextra.oracle import DEFAULT_ENUM_CAP
from dextra.problem import InvalidInstanceError
from dextra.saddle import compute_constants, euclidean_lipschitz
from dextra.solve_pipeline import SolvePipeline, build_solve_input
from dextra.solver import DivergenceError, RunTrace
from dextra.utils import check_dir_exists, get_args_from_configfile


logger = logging.getLogger(__name__)

EXIT_INVALID = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
FORMATS = ('table', 'kv')


def exit_codes(func):
    """ Map the domain errors of a command to its exit status. """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValueError as exc:
            logger.error('Invalid input: {}'.format(exc))
            sys.exit(EXIT_INVALID)
        except DivergenceError as exc:
            logger.error('Divergence: {}'.format(exc))
            sys.exit(EXIT_DIVERGENCE)
        except OSError as exc:
            logger.error('I/O error: {}'.format(exc))
            sys.exit(EXIT_IO)
    return wrapper


@exit_codes
def solve(instance, iters=100000, step='auto', record_every=100, seed=0,
          tolerance=0., with_oracle=False, pin_slack=False, out_dir=None,
          scaling='auto', init='midpoint', adaptive=False,
          oracle_method='auto', oracle_cap=DEFAULT_ENUM_CAP, log_level=None):
    """
    Solve an instance and write trace.csv, report.json, constants.json and
    manifest.json to the output directory.

    :param instance: instance file or name (tiny2, sixbus_synthetic, sixbus,
    random_seed<k>)
    :param iters: number of iterations
    :param step: step size, 'auto' or 'lipschitz'
    :param record_every: trace recording period
    :param seed: seed of the random initial point
    :param tolerance: early-stop tolerance on the residual sum
    :param with_oracle: solve the instance centrally as well
    :param pin_slack: fix the phase angle of the first bus (DC-OPF)
    :param out_dir: output directory, default ./runs/<name>-<timestamp>
    :param scaling: units of the DC-OPF variables, 'auto' (per unit) or
    'none' (MW, rad and $); reports are in MW, rad and $ either way
    :param init: 'midpoint' or 'random'
    :param adaptive: halve the step size on divergence
    :param oracle_method: 'auto', 'enumerate', 'cvxpy' or 'extragradient'
    :param oracle_cap: largest number of active sets the 'auto' oracle
    enumerates before switching to cvxpy
    :param log_level: logging level
    """
    pipeline = SolvePipeline(label=pathlib.Path(str(instance)).stem)
    pipeline.config(from_dict=build_solve_input(
        instance, iters=iters, step=step, record_every=record_every,
        seed=seed, tolerance=tolerance, with_oracle=with_oracle,
        pin_slack=pin_slack, out_dir=out_dir, scaling=scaling, init=init,
        adaptive=adaptive, oracle_method=oracle_method, oracle_cap=oracle_cap,
        log_level=log_level))
    pipeline.run()


def constants_record(instance, pin_slack=False, scaling='auto'):
    """ Constants of an instance with the step sizes of both rules. """
    spec, _ = as_problem_spec(resolve_instance(instance)[0], pin_slack,
                              scaling)
    W = laplacian(spec.graph)
    constants = compute_constants(spec, W)
    record = constants.to_dict()
    capped = record.pop('capped')
    lipschitz = euclidean_lipschitz(spec)
    record['L_euclidean'] = lipschitz
    record['step_size_lipschitz'] = 0.9 / lipschitz if lipschitz > 0. \
        else float('inf')
    return record, capped


@exit_codes
def constants(instance, format='table', pin_slack=False, scaling='auto'):
    """
    Print the constants of an instance and the derived step size.

    :param instance: instance file or name
    :param format: 'table' (aligned columns) or 'kv' (name=value lines)
    :param pin_slack: fix the phase angle of the first bus (DC-OPF)
    :param scaling: units of the DC-OPF variables, 'auto' or 'none'
    """
    if format not in FORMATS:
        raise ValueError('Unknown format: {}'.format(format))
    record, capped = constants_record(instance, pin_slack, scaling)
    pattern = '{:24s} {!r}\n' if format == 'table' else '{}={!r}\n'
    for name, value in record.items():
        sys.stdout.write(pattern.format(name, float(value)))
    if capped:
        separator = ' ' * 18 if format == 'table' else '='
        sys.stdout.write('capped{}{}\n'.format(separator, ','.join(capped)))


@exit_codes
def plotdata(trace, out_dir=None):
    """
    Write one two-column series file (iter, value) per monitored quantity of
    a trace table.

    :param trace: path of a trace.csv file
    :param out_dir: output directory, default <trace directory>/series
    """
    trace = pathlib.Path(trace)
    RunTrace.read(trace)
    out_dir = (trace.parent.joinpath('series') if out_dir is None
               else pathlib.Path(out_dir))
    check_dir_exists(out_dir, should_exist=True, mkdir=True)
    # Values are copied as text, so that series match the trace exactly
    frame = pd.read_csv(trace, dtype=str, keep_default_na=False)
    for column in RunTrace.COLUMNS[1:]:
        path = out_dir.joinpath('{}.csv'.format(column))
        frame[['iter', column]].to_csv(path, index=False)
    logger.info('Series written to {}'.format(out_dir))


@exit_codes
def batch(config_file, n_workers=2, outcome_file=None):
    """
    Run a JSON list of solve configurations (keyword arguments of `solve`)
    in parallel.

    :param config_file: path of the JSON file
    :param n_workers: number of dask workers
    :param outcome_file: (optional) file for the outcome of the runs
    """
    runs = get_args_from_configfile(config_file)
    if not isinstance(runs, list):
        raise InvalidInstanceError('Batch file should hold a list of '
                                   'configurations')
    macro = MacroPipeline()
    for n, options in enumerate(runs):
        label = '{:03d}-{}'.format(n + 1,
                                   pathlib.Path(str(options['instance'])).stem)
        pipeline = SolvePipeline(label=label)
        pipeline.config(from_dict=build_solve_input(**options))
        macro.add_task(pipeline)
    macro.setup_cluster(n_workers=n_workers, threads_per_worker=1)
    cluster = macro.client.cluster
    try:
        macro.run()
    finally:
        macro.shutdown()
        cluster.close()
    macro.print_outcome(to_file=outcome_file)


def main():
    fire.Fire({'solve': solve,
               'constants': constants,
               'plotdata': plotdata,
               'batch': batch,
               'pipeline': SolvePipeline})
