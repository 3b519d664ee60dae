import logging
import pathlib
import sys

from dextra.utils import check_dir_exists

logger = logging.getLogger(__name__)
_default_format = '%(asctime)s - %(name)30s - %(levelname)8s - %(message)s'
# Local copy of the standard streams, restored when file logging stops
_stream_dict = {'stderr': sys.stderr, 'stdout': sys.stdout}


class Logger(object):
    """
    Manage the log handlers of a solver run: one stream handler and, while
    a run writes its artifacts, one file handler in the output directory.
    """

    def __init__(self, label='dextra'):
        self.level = 'INFO'
        self.formatter = logging.Formatter(_default_format)
        self.stream = _stream_dict['stderr']
        self.filename = pathlib.Path(label).with_suffix('.log')
        self.handlers = {}

        self.logger = logging.getLogger()
        self.logger.setLevel(self.level)
        self.start_log_to_stream()

    @property
    def log_file(self):
        """ Path of the active log file, None if logging to stream only. """
        handler = self.handlers.get('file')
        if handler is None:
            return None
        return pathlib.Path(handler.baseFilename)

    def config(self, level=None, format=None, stream=None, filename=None):
        """
        Configure the logger and update the existing handlers.

        :param level: logging level name (e.g. 'debug')
        :param format: format string for the log records
        :param stream: 'stderr' or 'stdout'
        :param filename: name (or path) of the log file
        """
        if level is not None:
            self.level = level.upper()
            self.logger.setLevel(self.level)
        if format is not None:
            self.formatter = logging.Formatter(format)
        if stream is not None:
            if stream not in _stream_dict:
                raise ValueError('Unknown stream: {}'.format(stream))
            self.stream = _stream_dict[stream]
        if filename is not None:
            self.filename = pathlib.Path(filename)
        if 'stream' in self.handlers:
            self.start_log_to_stream()
        if 'file' in self.handlers:
            self.start_log_to_file(self.log_file.parent, append=True)

    def terminate(self):
        self._remove('stream')
        self._remove('file')

    def _remove(self, kind):
        handler = self.handlers.pop(kind, None)
        if handler is None:
            return
        self.logger.removeHandler(handler)
        if kind == 'file':
            logger.debug('Terminating stream to logfile: '
                         '{}'.format(handler.baseFilename))
            handler.close()
            self._redirect_std_streams(False)

    def _redirect_std_streams(self, redirect):
        if redirect:
            sys.stdout = Log(self.logger, logging.INFO)
            sys.stderr = Log(self.logger, logging.ERROR)
        else:
            sys.stdout = _stream_dict['stdout']
            sys.stderr = _stream_dict['stderr']

    def _add(self, kind, handler):
        handler.setFormatter(self.formatter)
        handler.setLevel(self.level)
        self.logger.addHandler(handler)
        self.handlers[kind] = handler

    def start_log_to_stream(self):
        """ Add a stream handler to the log, replacing the current one. """
        self._remove('stream')
        self._add('stream', logging.StreamHandler(self.stream))

    def start_log_to_file(self, directory='', append=False):
        """
        Add a file handler to the log, replacing the current one. STDOUT and
        STDERR are redirected to the log file as long as it is active.

        :param directory: directory of the log file (ignored if the file
        name already includes a path)
        :param append: if True, append to an existing log file
        """
        self._remove('file')
        if not self.filename.parent.name:
            file_path = pathlib.Path(directory).joinpath(self.filename.name)
        else:
            file_path = self.filename
        check_dir_exists(file_path.parent, should_exist=True)
        self._add('file', logging.FileHandler(file_path,
                                              mode='a' if append else 'w',
                                              delay=True))
        logger.debug('Start stream to file: {}'.format(file_path.as_posix()))
        self._redirect_std_streams(True)


class Log(object):
    """ File-like object forwarding writes to a logger. """

    def __init__(self, logger_obj, level):
        self.logger = logger_obj
        self.level = level

    def write(self, msg, *args, **kwargs):
        if msg.strip():
            self.logger.log(self.level, " ".join(msg.split()))

    def flush(self, *args, **kwargs):
        for handler in self.logger.handlers:
            handler.flush()
