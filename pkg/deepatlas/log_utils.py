# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.

"""Log files management functions"""

import json
from datetime import datetime
from os.path import isfile, getsize, join
from sys import stdout
from typing import TextIO, Optional, Dict, Any

import click

from .version import __version__

LOG_FILE_NAME: str = 'deepatlas.log'
MAX_LOG_FILE_SIZE = 5 * 1024 * 1024
START_SESSION_MARK = '--------------------- deepatlas log session start.'

_session_log: Optional[TextIO] = None


def get_path_to_log(out_dir: str) -> str:
    """Returns full path to log file"""
    return join(out_dir, LOG_FILE_NAME)


def restrict_log_size(out_dir: str) -> None:
    """
    Ensure that log file does not exceed MAX_LOG_FILE_SIZE
    """
    log_name = get_path_to_log(out_dir)

    if not isfile(log_name):
        return

    size = getsize(log_name)

    if size > MAX_LOG_FILE_SIZE:
        with open(log_name, mode='r+', encoding='utf-8') as log:
            log.seek(size - MAX_LOG_FILE_SIZE)
            content = log.read()
            log.seek(0)
            log.truncate()
            log.write(content)
            log.flush()


def init_log(out_dir: str, command: str) -> TextIO:
    """Performs initialization of log file and makes it the session log"""
    global _session_log  # pylint: disable=global-statement,invalid-name
    restrict_log_size(out_dir)
    log = open(get_path_to_log(out_dir), mode='a+', encoding='utf-8')  # pylint: disable=consider-using-with
    print(f'{START_SESSION_MARK} deepatlas version: {__version__} Command: {command} - '
          f'{datetime.now()}', file=log)
    log.flush()
    _session_log = log

    return log


def log_message(text: str) -> None:
    """Appends time-stamped line to session log, if any"""
    if _session_log is None:
        return

    print(f'{datetime.now().isoformat(timespec="seconds")} {text}', file=_session_log)
    _session_log.flush()


def log_warning(text: str) -> None:
    """Prints warning to stderr and appends it to session log"""
    click.secho(f'WARNING: {text}', fg='yellow', err=True)
    log_message(f'WARNING: {text}')


def dump_last_log_session(log: TextIO) -> None:
    """Prints to stdout content of given file starting from last session mark"""
    log.seek(0)
    content = log.read()
    pos = content.rindex(START_SESSION_MARK)
    stdout.write(content[pos:])


def is_unexpected_exit(ret_code: int) -> bool:
    """Check if command exits with error"""
    return ret_code != 0


def shutdown_log(ret_code: int, log_file: TextIO) -> None:
    """Closes log with last session dump if necessary"""
    global _session_log  # pylint: disable=global-statement,invalid-name

    if is_unexpected_exit(ret_code):
        dump_last_log_session(log_file)

    if _session_log is log_file:
        _session_log = None

    log_file.close()


class MetricLog:
    """JSON-lines metric log, one object per line"""

    def __init__(self, path: str, log_wall_time: bool = False) -> None:
        self.path = path
        self.log_wall_time = log_wall_time
        self._start = datetime.now()
        self._file = open(path, mode='w', encoding='utf-8')  # pylint: disable=consider-using-with

    def write(self, record: Dict[str, Any]) -> None:
        """Appends record to log"""
        if self.log_wall_time:
            record = dict(record, wall_time=(datetime.now() - self._start).total_seconds())

        self._file.write(json.dumps(record, sort_keys=True) + '\n')
        self._file.flush()

    def close(self) -> None:
        """Closes log file"""
        self._file.close()

    def __enter__(self) -> 'MetricLog':
        return self

    def __exit__(self, *args: Any) -> None:
        self.close()
