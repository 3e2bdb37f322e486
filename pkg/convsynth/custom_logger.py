"""This module configures the root logger used by every stage of the pipeline: a compact console
   handler for progress messages and a detailed run log file, rewritten on every command.

   The pipeline modules log through the root logger (``logging.info(...)``), so the handlers set
   up here receive the messages of all of them. Chatty third-party loggers are capped at WARNING.
"""
import logging
from logging import config

CONSOLE_FORMAT = "%(levelname)-7s %(module)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)-7s %(module)s.%(funcName)s:%(lineno)d %(message)s"
QUIET_LOGGERS = ("matplotlib", "PIL")


def formatters() -> dict:
    """Console lines carry level and module, file lines add time, function and line number."""
    return {"console": {"format": CONSOLE_FORMAT},
            "run_log": {"format": FILE_FORMAT}}


def handlers(console_level: int, file_level: int, filename) -> dict:
    """Handler section of the logging configuration.

       :parameter console_level: Lowest level printed to stderr
       :type console_level: int
       :parameter file_level: Lowest level written to the run log
       :type file_level: int
       :parameter filename: Run log, truncated when the handler opens it
       :type filename: str or pathlib.Path

       :return: dictConfig handlers
       :rtype: dict
    """
    return {"console": {"class": "logging.StreamHandler", "formatter": "console",
                        "level": console_level},
            "run_log": {"class": "logging.FileHandler", "formatter": "run_log",
                        "filename": str(filename), "encoding": "utf-8", "mode": "w",
                        "level": file_level}}


def logging_config(console_level: int = logging.INFO, file_level: int = logging.DEBUG,
                   filename='convsynth.log') -> dict:
    """The complete dictConfig dictionary for one command-line run."""
    return {"version": 1,
            "disable_existing_loggers": False,
            "formatters": formatters(),
            "handlers": handlers(console_level, file_level, filename),
            # NOTSET on the root leaves the filtering to the handlers
            "root": {"handlers": ["console", "run_log"], "level": logging.NOTSET},
            "loggers": {name: {"level": logging.WARNING} for name in QUIET_LOGGERS}}


def logger_setup(console_level: int = logging.INFO, file_level: int = logging.DEBUG,
                 filename='convsynth.log'):
    """Installs the console and run log handlers on the root logger.

       :parameter console_level: logging module level printed to the console,
                                 default = logging.INFO == 20
       :type console_level: int, optional
       :parameter file_level: logging module level written to the run log,
                              default = logging.DEBUG == 10
       :type file_level: int, optional
       :parameter filename: Run log file, default = 'convsynth.log'
       :type filename: str or pathlib.Path, optional
    """
    config.dictConfig(logging_config(console_level, file_level, filename))
    logging.info("logging to %s (console level %s, file level %s)", filename,
                 logging.getLevelName(console_level), logging.getLevelName(file_level))
