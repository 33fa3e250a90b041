try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path

VERSION = '0.3.0'

# all angular tolerances below are in radians unless the name says otherwise
UNIT_TOLERANCE = 1e-9
DEGENERATE_ANGLE = 1e-7
DEGENERATE_CHORD = 1e-12
DEGENERATE_NORM = 1e-12
SINGULAR_SUM = 1e-6
# global-linear rows with |sum of cosines| at or below this are kept out of training
GLOBAL_NORMALIZER_FLOOR = 0.5
DENOMINATOR_FLOOR = 1e-12
GAZE_DOT_CLAMP = 1 - 1e-9
EMBEDDING_INIT_STD = 0.02
FD_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# finite differences are not taken this close to a |.| kink
KINK_MARGIN = 1e-4

ROOT = Path(__file__).resolve().parent


class ConfigReader:
    def __init__(self):
        with open(ROOT / 'config.toml', 'rb') as f:
            config = tomllib.load(f)
            self.runs = config['runs_path']
            self.default_config = config['default_config']
            self.seed_env_var = config['seed_env_var']


configreader = ConfigReader()


def runs_path():
    return Path(configreader.runs).expanduser()


def default_config_path():
    return ROOT / configreader.default_config


def seed_env_var():
    return configreader.seed_env_var
