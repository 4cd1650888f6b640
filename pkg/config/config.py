import json
import logging
import os

from dotenv import load_dotenv
from pydantic import ValidationError

from cellnet.errors import ConfigError
from cellnet.models.run_config import RunConfig

# Load .env correctly
env_path = os.path.join(os.path.dirname(__file__), ".env")
load_dotenv(env_path)

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

RUNS_DIR = os.getenv("CELLNET_RUNS_DIR", "runs")
LOG_LEVEL = os.getenv("CELLNET_LOG_LEVEL", "INFO")
DEFAULT_CONFIG = os.getenv("CELLNET_DEFAULT_CONFIG", os.path.join(ROOT_DIR, "config", "default_run.json"))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_logging_ready = False


def setup_logging(level: str = None):
    """Configure the root logger once; later calls only adjust the level"""
    global _logging_ready
    level = (level or LOG_LEVEL).upper()
    if not _logging_ready:
        logging.basicConfig(level=level, format=LOG_FORMAT)
        _logging_ready = True
    else:
        logging.getLogger().setLevel(level)


def parse_override(item: str):
    """'a.b.c=value' -> (['a', 'b', 'c'], value); value parsed as JSON, else kept as a string"""
    if "=" not in item:
        raise ConfigError(f"Override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(document: dict, overrides=None) -> dict:
    for item in overrides or []:
        path, value = parse_override(item)
        node = document
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return document


def load_run_config(path: str = None, overrides=None) -> RunConfig:
    """Read a run document (default: CELLNET_DEFAULT_CONFIG), apply --set overrides, validate"""
    path = path or DEFAULT_CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"Config {path} must be a JSON object")

    apply_overrides(document, overrides)
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"Invalid config {path}: {location}: {first['msg']}")
    if config.runs_dir is None:
        config.runs_dir = RUNS_DIR
    return config


def run_dir(config: RunConfig) -> str:
    """<runs_dir>/<config hash>-s<seed>"""
    return os.path.join(config.runs_dir or RUNS_DIR, f"{config.config_hash()}-s{config.seed}")


def save_run_config(config: RunConfig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
    return path
