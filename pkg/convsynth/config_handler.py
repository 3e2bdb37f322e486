"""This module contains functions to create, load, validate and write the JSON run configuration
   of the reconstruction pipeline.

   The functions:

   - json_write
   - json_load

   can be used to write a payload or load any json file, just specify filename='your_file.json'
   and your payload (if applicable).

   A run configuration has a "version" and one section per pipeline stage; every section maps
   onto a frozen dataclass of the module that consumes it. Unknown sections or keys, values of
   the wrong type and values violating a section's invariants raise ConfigError.
"""
import dataclasses
import json
import logging
import pathlib
import typing

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for configuration files that do not match the schema."""


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    """Locations of the dataset, the filter bank, checkpoints and outputs."""
    data_dir: str = "data"
    bank_path: str = "bank"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One validated section per pipeline stage."""
    version: int
    paths: typing.Any
    simulate: typing.Any
    highpass: typing.Any
    dictionary: typing.Any
    fista: typing.Any
    lambda_maps: typing.Any
    training: typing.Any
    metrics: typing.Any

    def to_dict(self) -> dict:
        """Plain JSON-serializable dictionary."""
        return dataclasses.asdict(self)


def _sections() -> dict:
    # imported here: the consuming modules import this one for their JSON files
    import convsynth.simulate as si
    import convsynth.highpass as hp
    import convsynth.dictionary as di
    import convsynth.solvers as so
    import convsynth.lambda_maps as lm
    import convsynth.training as tr
    import convsynth.metrics as me
    return {"paths": PathsConfig, "simulate": si.SimulateConfig, "highpass": hp.HighpassConfig,
            "dictionary": di.CdlConfig, "fista": so.FistaConfig, "lambda_maps": lm.MapConfig,
            "training": tr.TrainConfig, "metrics": me.MetricConfig}


def json_write(payload: dict, filename='config.json'):
    """Takes a payload and filename and writes the payload to the file.

       :parameter payload: Dictionary to be writen to json file
       :type payload: dict
       :parameter filename: Filename of json file to be written to, default file is 'config.json'
       :type filename: str or pathlib.Path, optional
    """
    logging.debug("writing json file %s", filename)
    with open(filename, "w", encoding='utf-8') as outfile:
        json.dump(payload, outfile, indent=2, sort_keys=True)
        outfile.write("\n")


def json_load(filename='config.json') -> dict:
    """Takes filename of a json file and returns the data it reads from it.

       :parameter filename: Filename of json file to be read, default file is 'config.json'
       :type filename: str or pathlib.Path, optional

       :return: The dictionary loaded from the json file
       :rtype: dict
    """
    logging.debug("loading json file %s", filename)
    with open(filename, "r", encoding='utf-8') as json_data_file:
        return json.load(json_data_file)


def default_config() -> dict:
    """The default run configuration as a plain dictionary."""
    config = {"version": CONFIG_VERSION}
    for name, section in _sections().items():
        config[name] = json.loads(json.dumps(dataclasses.asdict(section())))
    return config


def json_create(overwrite: bool = False, filename='config.json'):
    """Writes the default run configuration if the file is missing or overwrite is True.

       :parameter overwrite: If set to true it will overwrite the config file even if one is found
       :type overwrite: bool, optional
       :parameter filename: Destination of the configuration
       :type filename: str or pathlib.Path, optional
    """
    logging.info("setting up config file")
    if not pathlib.Path(filename).exists() or overwrite:
        json_write(default_config(), filename=filename)


def config_update(section: str, values: dict, filename='config.json'):
    """Overwrites one section of a configuration file with new values (other keys are kept).

       :parameter section: Name of the section, e.g. 'training'
       :type section: str
       :parameter values: Keys and values to be written into the section
       :type values: dict
    """
    logging.info("updating config section %s", section)
    config_dict = json_load(filename)
    config_dict.setdefault(section, {}).update(values)
    logging.debug("updated config before writing to file: %s", config_dict)
    json_write(config_dict, filename)


def _coerce(where: str, value, default):
    if default is None:  # optional reals, e.g. fista.tau
        if value is None:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number or null, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(_coerce(f"{where}[]", item, default[0]) if default else item
                         for item in value)
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def build_section(name: str, cls, values: dict):
    """Validates one section dictionary against the fields of its dataclass and builds it."""
    if not isinstance(values, dict):
        raise ConfigError(f"section {name} must be an object")
    defaults = cls()
    known = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name}: {unknown}")
    kwargs = {key: _coerce(f"{name}.{key}", value, getattr(defaults, key))
              for key, value in values.items()}
    try:
        return cls(**kwargs)
    except ValueError as error:
        raise ConfigError(f"invalid section {name}: {error}") from error


def parse_run_config(config: dict) -> RunConfig:
    """Validates a configuration dictionary; missing sections and keys take default values."""
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a JSON object")
    sections = _sections()
    unknown = sorted(set(config) - set(sections) - {"version"})
    if unknown:
        raise ConfigError(f"unknown configuration sections: {unknown}")
    version = config.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported configuration version {version!r}, "
                          f"expected {CONFIG_VERSION}")
    built = {name: build_section(name, cls, config.get(name, {}))
             for name, cls in sections.items()}
    check_sections(built)
    return RunConfig(version=version, **built)


def check_sections(built: dict):
    """Constraints between sections that no single section can check on its own.

       :parameter built: Validated sections by name
       :type built: dict

       :raise ConfigError: Image size incompatible with the map network, the filter size or
           the SSIM window
    """
    image_size = built["simulate"].image_size
    side = min(image_size)
    if built["lambda_maps"].source == "network" and any(n % 4 for n in image_size):
        raise ConfigError(f"simulate.image_size {list(image_size)} must be divisible by 4 "
                          f"for lambda_maps.source network")
    if built["dictionary"].kernel_size > side:
        raise ConfigError(f"dictionary.kernel_size {built['dictionary'].kernel_size} "
                          f"exceeds the image side {side}")
    if built["metrics"].window > side:
        raise ConfigError(f"metrics.window {built['metrics'].window} exceeds the image "
                          f"side {side}")


def load_run_config(filename='config.json') -> RunConfig:
    """Loads and validates a run configuration file.

       :raise ConfigError: Unreadable file or schema violation
    """
    logging.info("loading run configuration %s", filename)
    try:
        config = json_load(filename)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot read configuration {filename}: {error}") from error
    return parse_run_config(config)


def with_seed(run_config: RunConfig, seed: int) -> RunConfig:
    """Returns a copy in which every section's seed field equals seed."""
    replaced = {}
    for field in dataclasses.fields(run_config):
        section = getattr(run_config, field.name)
        if dataclasses.is_dataclass(section) and hasattr(section, "seed"):
            replaced[field.name] = dataclasses.replace(section, seed=seed)
    return dataclasses.replace(run_config, **replaced)
