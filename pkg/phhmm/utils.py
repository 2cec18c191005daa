import logging
import os
import typing
from configparser import ConfigParser
from pathlib import Path

import typer

ENV_PREFIX = 'PHHMM__'
CONFIG_PATH_ENV = 'PHHMM_CONFIG_PATH'


def _get_default_config_paths() -> typing.Tuple:
    result = [
        Path('/etc/phhmm/phhmm.conf'),
        Path(typer.get_app_dir('phhmm')) / 'config.conf',
    ]
    from_env_path = os.getenv(CONFIG_PATH_ENV)
    if from_env_path:
        result.append(Path(from_env_path))
    return tuple(result)


def load_config(
        paths: typing.Optional[
            typing.Iterable[typing.Union[str, Path]]
        ] = None,
        environment: typing.Optional[typing.Mapping[str, str]] = None,
) -> ConfigParser:
    """Load configuration values

    Config is composed by looking for values in multiple places:

    - Default config values, as specified in the ``_get_default_config()``
      function

    - The following paths, if they exist:
      - /etc/phhmm/phhmm.conf
      - $HOME/.config/phhmm/config.conf
      - whatever file is specified by the PHHMM_CONFIG_PATH environment
        variable

    - Environment variables named like `PHHMM__{SECTION}__{KEY}`

    """

    config = _get_default_config()
    config.read(paths if paths is not None else _get_default_config_paths())
    env = os.environ if environment is None else environment
    for section, section_options in get_config_from_env(env).items():
        for key, value in section_options.items():
            try:
                config[section][key] = value
            except KeyError:
                config[section] = {key: value}
    return config


def get_config_from_env(
        environment: typing.Mapping[str, str]
) -> typing.Dict[str, typing.Dict[str, str]]:
    result = {}
    for key, value in environment.items():
        if key.startswith(ENV_PREFIX):
            try:
                section, config_key = [i.lower() for i in key.split('__')[1:]]
            except ValueError:
                logging.getLogger(__name__).warning(
                    'Could not read variable %s, ignoring...', key)
                continue
            conf_section = result.setdefault(section, {})
            conf_section[config_key] = value
    return result


def _get_default_config():
    config = ConfigParser()
    config['em'] = {}
    config['em']['tol'] = '1e-4'
    config['em']['max_iters'] = '500'
    config['em']['n_states'] = '2'
    config['em']['weight_floor'] = '1e-12'
    config['em']['monotone_tol'] = '1e-8'
    config['em']['laplace_monotone_tol'] = '1e-3'
    config['newton'] = {}
    config['newton']['max_iter'] = '100'
    config['newton']['tol'] = '1e-10'
    config['newton']['max_halvings'] = '30'
    config['newton']['separation_norm'] = '50'
    config['frailty'] = {}
    config['frailty']['sigma2_floor'] = '1e-6'
    config['frailty']['sigma2_init'] = '1.0'
    config['frailty']['max_outer_iter'] = '200'
    config['frailty']['inner_tol'] = '1e-8'
    config['ct'] = {}
    config['ct']['max_iter'] = '200'
    config['replicate'] = {}
    config['replicate']['replicates'] = '100'
    config['replicate']['jobs'] = '1'
    config['replicate']['seed'] = '20240101'
    config['replicate']['individuals'] = '50'
    config['replicate']['transitions'] = '25'
    config['io'] = {}
    config['io']['gap_split_hours'] = '24'
    config['logging'] = {}
    config['logging']['level'] = 'WARNING'
    return config


def configure_logging(level: typing.Union[str, int] = 'WARNING'):
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.WARNING)
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    logging.getLogger('phhmm').setLevel(level)
