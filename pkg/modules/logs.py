"""Boxed console output plus rotating file logs for training runs"""

import io
import logging
import os
import sys
import traceback
from logging.handlers import RotatingFileHandler

LOG_DIR = "logs"
RUN_LOG = "run.log"
CONSOLE_MARK = "_flow_pretrain_console"

TRACE = 1
DEBUG = logging.DEBUG
INFO = logging.INFO
WARNING = logging.WARNING
ERROR = logging.ERROR
CRITICAL = logging.CRITICAL


def tag_record(record):
    """File records carry [LEVEL] and [file:line] columns"""
    record.levelname = f"[{record.levelname}]"
    record.filename = f"[{record.filename}:{record.lineno}]"
    return True


_this_file = os.path.normcase(tag_record.__code__.co_filename)


def caller_of_logger(stack_info=False):
    """(filename, line, function, stack) of the first frame outside this module"""
    frame = logging.currentframe()
    while frame is not None and os.path.normcase(frame.f_code.co_filename) in (_this_file, logging._srcfile):
        frame = frame.f_back
    if frame is None:
        return "(unknown file)", 0, "(unknown function)", None
    stack = None
    if stack_info:
        with io.StringIO() as buffer:
            buffer.write("Stack (most recent call last):\n")
            traceback.print_stack(frame, file=buffer)
            stack = buffer.getvalue().rstrip("\n")
    return frame.f_code.co_filename, frame.f_lineno, frame.f_code.co_name, stack


class MyLogger:
    """
    Console lines are boxed to `screen_width`; file lines are prefixed with time, source and level.

    One process-wide log lives under <default_dir>/logs and each run mirrors its lines into
    <out_dir>/run.log. `ghost` draws a transient progress line that the next message clears.
    """

    def __init__(self, logger_name, log_file, log_level, default_dir, screen_width, separating_character, ignore_ghost, log_size,
                 log_count):
        self.logger_name = logger_name
        self.default_dir = default_dir
        self.screen_width = screen_width
        self.separating_character = separating_character
        self.ignore_ghost = ignore_ghost
        self.log_size = log_size
        self.log_count = log_count
        self.log_dir = os.path.join(default_dir, LOG_DIR)
        os.makedirs(self.log_dir, exist_ok=True)
        self.main_log = log_file if os.path.isdir(os.path.dirname(log_file)) else os.path.join(self.log_dir, log_file)
        self.main_handler = None
        self.run_handlers = {}
        self.spacing = 0

        logging.addLevelName(TRACE, "TRACE")
        logging.TRACE = TRACE
        self._log_level = TRACE if log_level.upper() == "TRACE" else getattr(logging, log_level.upper())
        self._logger = logging.getLogger(logger_name)
        self._logger.setLevel(self._log_level)
        console = next((h for h in self._logger.handlers if getattr(h, CONSOLE_MARK, False)), None)
        if console is None:
            console = logging.StreamHandler()
            setattr(console, CONSOLE_MARK, True)
            self._logger.addHandler(console)
        console.setLevel(self._log_level)

    def _file_handler(self, path):
        handler = RotatingFileHandler(
            path, mode="w", delay=True, maxBytes=self.log_size * 1024 * 1024, backupCount=self.log_count, encoding="utf-8"
        )
        handler.addFilter(tag_record)
        self._format(handler=handler)
        return handler

    def _format(self, handler=None, border=True, files_only=False, blank_prefix=False):
        width = self.screen_width - 2
        body = f"| %(message)-{width}s |" if border else f"%(message)-{width}s"
        prefix = " " * 65 if blank_prefix else "[%(asctime)s] %(filename)-27s %(levelname)-10s "
        for h in [handler] if handler else self._logger.handlers:
            to_file = isinstance(h, RotatingFileHandler)
            if to_file or not files_only:
                h.setFormatter(logging.Formatter(f"{prefix if to_file else ''}{body}"))

    def add_main_handler(self):
        self.main_handler = self._file_handler(self.main_log)
        self._logger.addHandler(self.main_handler)

    def remove_main_handler(self):
        self._logger.removeHandler(self.main_handler)
        if self.main_handler is not None:
            self.main_handler.close()

    def add_run_handler(self, out_dir):
        """Mirror every following line into <out_dir>/run.log"""
        if out_dir not in self.run_handlers:
            os.makedirs(out_dir, exist_ok=True)
            self.run_handlers[out_dir] = self._file_handler(os.path.join(out_dir, RUN_LOG))
        self._logger.addHandler(self.run_handlers[out_dir])

    def remove_run_handler(self, out_dir):
        handler = self.run_handlers.pop(out_dir, None)
        if handler is not None:
            self._logger.removeHandler(handler)
            handler.close()

    def _centered(self, text, fill=" ", pad=True):
        room = self.screen_width - 2
        if len(text) > room:
            return text
        edge = " " if pad else fill
        text = f"{edge}{text}{edge}"
        left = (room - len(text)) // 2 - 1
        right = room - len(text) - left - 2
        return f"{fill * left}{text}{fill * right}"

    def separator(self, text=None, space=True, border=True, loglevel="INFO"):
        """Boxed banner; `space=False` fills around the title with the divider character"""
        fill = " " if space else self.separating_character
        rule = f"|{self.separating_character * self.screen_width}|"
        for handler in self._logger.handlers:
            self._format(handler, border=False)
        if border:
            self.print_line(rule, loglevel)
        if text:
            for line in str(text).split("\n"):
                self.print_line(f"|{fill}{self._centered(line, fill=fill)}{fill}|", loglevel)
            if border:
                self.print_line(rule, loglevel)
        for handler in self._logger.handlers:
            self._format(handler)
        return [text]

    def print_line(self, msg, loglevel="INFO", *args, **kwargs):
        level = TRACE if loglevel.upper() == "TRACE" else getattr(logging, loglevel.upper())
        self._emit(level, msg, args, **kwargs)
        return [str(msg)]

    def debug(self, msg, *args, **kwargs):
        self._emit(DEBUG, msg, args, **kwargs)

    def info(self, msg, *args, **kwargs):
        self._emit(INFO, msg, args, **kwargs)

    def info_center(self, msg, *args, **kwargs):
        self._emit(INFO, self._centered(str(msg)), args, **kwargs)

    def warning(self, msg, *args, **kwargs):
        self._emit(WARNING, msg, args, **kwargs)

    def error(self, msg, *args, **kwargs):
        self._emit(ERROR, msg, args, **kwargs)

    def critical(self, msg, *args, **kwargs):
        self._emit(CRITICAL, msg, args, **kwargs)

    def stacktrace(self):
        """Traceback of the exception being handled, at debug level"""
        self.debug(traceback.format_exc())

    def _pad(self, text):
        return str(text).ljust(self.spacing)

    def ghost(self, text):
        """Overwrite the current console line with a progress message"""
        if self.ignore_ghost:
            return
        print(self._pad(f"| {text}"), end="\r")
        self.spacing = len(text) + 2

    def exorcise(self):
        """Blank the progress line"""
        if self.ignore_ghost:
            return
        print(self._pad(" "), end="\r")
        self.spacing = 0

    def _emit(self, level, msg, args, exc_info=None, extra=None, stack_info=False):
        if not self._logger.isEnabledFor(level):
            return
        msg = str(msg)
        if self.spacing > 0:
            self.exorcise()
        lines = msg.split("\n")
        if len(lines) > 1:
            # continuation lines keep the file columns aligned without repeating the prefix
            self._emit(level, lines[0], args, exc_info=exc_info, extra=extra, stack_info=stack_info)
            self._format(files_only=True, blank_prefix=True)
            for line in lines[1:]:
                self._emit(level, line, args, extra=extra)
            self._format()
            return
        filename, lineno, func, stack = caller_of_logger(stack_info)
        if exc_info and not isinstance(exc_info, tuple):
            exc_info = (type(exc_info), exc_info, exc_info.__traceback__) if isinstance(exc_info, BaseException) else sys.exc_info()
        record = self._logger.makeRecord(self._logger.name, level, filename, lineno, msg, args, exc_info, func, extra, stack)
        self._logger.handle(record)
