"""Shared helpers: exceptions, config attribute checks, YAML and JSON files"""

import hashlib
import json
import logging
import os
import signal
from collections import OrderedDict

import ruamel.yaml
from pytimeparse2 import parse
from ruamel.yaml.constructor import ConstructorError

logger = logging.getLogger("Flow Pretrain")


class Failed(Exception):
    """Bad input: config, dataset, checkpoint or file format"""


class ShapeError(Failed):
    """Tensor shapes do not conform."""


class NumericError(Failed):
    """A tensor holds NaN or Inf."""


class Diverged(Failed):
    """Training loss became non-finite."""


def get_list(data, cast=str):
    """
    A list from a YAML sequence or a comma separated string, each item passed through `cast`.

    Raises:
        ValueError: when an item cannot be cast.
    """
    if data is None:
        return None
    items = data if isinstance(data, (list, tuple)) else str(data).split(",")
    return [cast(item.strip() if isinstance(item, str) else item) for item in items]


def git_commit(path="."):
    """Current commit of the repository holding `path`, or None outside one"""
    try:
        from git import InvalidGitRepositoryError
        from git import NoSuchPathError
        from git import Repo
    except ImportError:
        return None
    try:
        return Repo(path=path, search_parent_directories=True).head.commit.hexsha
    except (InvalidGitRepositoryError, NoSuchPathError, ValueError):
        return None


def config_hash(data):
    """Stable short hash of a json-serialisable config tree."""
    payload = json.dumps(to_plain(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def to_plain(data):
    """Convert ruamel containers, tuples and numpy scalars into plain python values."""
    if isinstance(data, dict):
        return {str(k): to_plain(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_plain(v) for v in data]
    if hasattr(data, "item") and not isinstance(data, (str, bytes)):
        return data.item()
    return data


def _as_int(value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(value)
    return value


def _as_list(cast):
    def convert(value):
        values = get_list(value, cast)
        if not values:
            raise ValueError(value)
        return values

    return convert


def _as_bool(value):
    if not isinstance(value, bool):
        raise ValueError(value)
    return value


def _as_seconds(value):
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    seconds = parse(str(value))
    if seconds is None:
        raise ValueError(value)
    return int(seconds)


def _list_int(value):
    return _as_int(int(value) if isinstance(value, str) else value)


# var_type -> (converter, lower bound applies, problem text)
CONVERTERS = {
    "str": (lambda v: v, False, None),
    "bool": (_as_bool, False, "must be either true or false"),
    "int": (_as_int, True, "must an integer >= {min_num}"),
    "float": (float, True, "must a float >= {min_float}"),
    "time_parse": (_as_seconds, True, "must be a valid time format such as 90, 15m or 1h"),
    "int_list": (_as_list(_list_int), True, "must be a list of integers >= {min_num}"),
    "float_list": (_as_list(float), False, "must be a list of numbers"),
}


class check:
    """Read typed attributes from the loaded config and record what was resolved"""

    def __init__(self, config):
        self.config = config

    def check_for_attribute(
        self,
        data,
        attribute,
        parent=None,
        test_list=None,
        default=None,
        do_print=True,
        default_is_none=False,
        var_type="str",
        min_num=0,
        save=True,
    ):
        """
        Look up `parent.attribute` in `data`, falling back to `default` with a warning.

        Args:
            data (dict): The configuration data to search.
            attribute (str): The name of the attribute key to search for.
            parent (str, optional): The top level section holding the attribute.
            test_list (dict, optional): Valid values mapped to their descriptions.
            default (any, optional): Value used when the attribute is missing or blank.
            do_print (bool, optional): Warn when the default is used.
            default_is_none (bool, optional): A missing or blank attribute resolves to None.
            var_type (str, optional): One of CONVERTERS.
            min_num (int, optional): Lower bound for numeric types.
            save (bool, optional): Record the resolved value for config.resolved.yml.

        Raises:
            Failed: when a present value is invalid, or a required attribute is missing.
        """
        value = self._resolve(data, attribute, parent, test_list, default, do_print, default_is_none, var_type, min_num)
        if save:
            self.config.record(parent, attribute, value)
        return value

    def _resolve(self, data, attribute, parent, test_list, default, do_print, default_is_none, var_type, min_num):
        section = (data or {}).get(parent) if parent is not None else data
        text = f"{attribute} attribute" if parent is None else f"{parent} sub-attribute {attribute}"
        raw = section.get(attribute) if isinstance(section, dict) else None
        if raw is None:
            if default_is_none:
                return None
            if default is None:
                raise Failed(f"Config Error: {text} not found")
            if do_print and isinstance(section, dict):
                logger.warning(f"Config Warning: {text} {'is blank' if attribute in section else 'not found'} using {default} as default")
            return default

        convert, bounded, problem = CONVERTERS[var_type]
        try:
            value = convert(raw)
            values = value if isinstance(value, list) else [value]
            if bounded and any(v < min_num for v in values):
                raise ValueError(raw)
        except (TypeError, ValueError):
            raise Failed(f"Config Error: {text} {problem.format(min_num=min_num, min_float=float(min_num))}") from None

        if test_list is not None and value not in test_list:
            options = "\n".join(f"    {option} ({description})" for option, description in test_list.items())
            raise Failed(f"Config Error: {text}: {value} is an invalid input\n{options}")
        return value


def load_json(file):
    """Contents of a json file, or {} when it does not exist"""
    if not os.path.isfile(file):
        return {}
    with open(file, encoding="utf-8") as handle:
        return json.load(handle)


def save_json(data, dest):
    """Save json file to destination."""
    try:
        with open(dest, "w", encoding="utf-8") as file:
            json.dump(to_plain(data), file, ensure_ascii=False, indent=4)
    except OSError as e:
        logger.error(f"Failed to save JSON file: {e.filename} - {e.strerror}.")


class GracefulKiller:
    """
    Catches SIGTERM so a training loop can finish its current step and keep its best checkpoint.
    """

    kill_now = False

    def __init__(self):
        try:
            signal.signal(signal.SIGTERM, self.exit_gracefully)
        except ValueError:
            # not in the main thread
            pass

    def exit_gracefully(self, *args):
        self.kill_now = True


class EnvStr(str):
    """String resolved from an !ENV tag that remembers the variable name"""

    def __new__(cls, env_var, resolved_value):
        instance = super().__new__(cls, resolved_value)
        instance.env_var = env_var
        return instance


class YAML:
    """
    Round-trip YAML file where `!ENV NAME` values resolve from the environment when loaded
    and are written back as tags.
    """

    def __init__(self, path=None, input_data=None, check_empty=False, create=False):
        self.path = path
        self.yaml = ruamel.yaml.YAML()
        self.yaml.indent(mapping=2, sequence=4, offset=2)
        self.yaml.Constructor.add_constructor("!ENV", self._env_constructor)
        self.yaml.Representer.add_representer(EnvStr, self._env_representer)

        try:
            if input_data:
                self.data = self.yaml.load(input_data)
            elif create and not os.path.exists(self.path):
                self.data = {}
            else:
                with open(self.path, encoding="utf-8") as handle:
                    self.data = self.yaml.load(handle)
        except ruamel.yaml.error.YAMLError as e:
            err = str(e).replace("\n", "\n      ")
            raise Failed(f"YAML Error: {err}") from e
        except OSError as e:
            raise Failed(f"YAML Error: {e}") from e
        if not self.data or not isinstance(self.data, dict):
            if check_empty:
                raise Failed("YAML Error: File is empty")
            self.data = {}

    @staticmethod
    def _env_constructor(loader, node):
        name = loader.construct_scalar(node)
        value = os.getenv(name)
        if value is None:
            raise ConstructorError(f"Environment variable '{name}' not found")
        return EnvStr(name, value)

    @staticmethod
    def _env_representer(dumper, data):
        return dumper.represent_scalar("!ENV", data.env_var)

    def save(self):
        if self.path:
            with open(self.path, "w", encoding="utf-8") as handle:
                self.yaml.dump(self.data, handle)


class BoundedCache:
    """Least-recently-used mapping holding at most `capacity` entries; capacity 0 stores nothing"""

    def __init__(self, capacity):
        self.capacity = max(0, int(capacity))
        self._entries = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key, default=None):
        if key not in self._entries:
            return default
        self._entries.move_to_end(key)
        return self._entries[key]

    def put(self, key, value):
        """Store `value` unless `key` is already held; returns the held value"""
        if key in self._entries:
            self._entries.move_to_end(key)
            return self._entries[key]
        if self.capacity:
            self._entries[key] = value
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return value
