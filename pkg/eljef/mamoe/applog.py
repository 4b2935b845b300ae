# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Application Logging Setup"""

import logging
import sys

from typing import IO

from colorlog import ColoredFormatter

DEFAULT_COLORS = {
    'DEBUG': 'cyan',
    'WARNING': 'yellow',
    'ERROR': 'red',
    'CRITICAL': 'red'
}

_OWNED = '_mamoe_handler'


def setup_app_logging(debug: bool, log_file: str = None, colors: dict = None, stream: IO = None) -> None:
    """Sets up the root logger for the ``mamoe`` command.

    Handlers installed by an earlier call are replaced, so calling this twice
    does not duplicate output.

    Args:
        debug: Enable DEBUG logging level. Default is INFO.
        log_file: If specified, logging to a file is enabled at DEBUG level.
        colors: Colors (supported by colorlog) to enable for logging messages displayed on the console.
        stream: Console stream. Default is stderr, leaving stdout to command results.

    Note:
        Colorized console logging is enabled by default.
    """
    color_dict = colors if colors else DEFAULT_COLORS
    level = logging.DEBUG if debug else logging.INFO

    logger = logging.getLogger()
    for handler in [h for h in logger.handlers if getattr(h, _OWNED, False)]:
        logger.removeHandler(handler)
        handler.close()
    logger.setLevel(logging.DEBUG if log_file else level)

    c_formatter = ColoredFormatter('%(log_color)s%(levelname)-8s%(reset)s %(message)s', log_colors=color_dict)
    c_handler = logging.StreamHandler(stream or sys.stderr)
    c_handler.setLevel(level)
    c_handler.setFormatter(c_formatter)
    setattr(c_handler, _OWNED, True)
    logger.addHandler(c_handler)

    if log_file:
        l_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        f_handler = logging.FileHandler(log_file)
        f_handler.setLevel(logging.DEBUG)
        f_handler.setFormatter(logging.Formatter(l_format))
        setattr(f_handler, _OWNED, True)
        logger.addHandler(f_handler)
