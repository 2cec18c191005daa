import enum

# linear predictors are clamped to this range before exponentiation
ETA_CLAMP = 700.0
HOURS_PER_DAY = 24
GAP_SPLIT_HOURS = 24.0
SCHEMA_VERSION = 1
DEFAULT_N_INDIVIDUALS = 50
DEFAULT_N_TRANSITIONS = 25


class Method(str, enum.Enum):
    PMM = 'pmm'
    DT = 'dt'
    CT = 'ct'
    PH = 'ph'


class TransitionMode(str, enum.Enum):
    PH = 'ph'
    DT = 'dt'
    CT = 'ct'


class SimulationMode(str, enum.Enum):
    SURVIVAL = 'survival'
    DISCRETE = 'discrete'


class EventTimeMode(str, enum.Enum):
    DISCRETE = 'discrete'
    HETEROGENEOUS = 'heterogeneous'


class RandomEffects(str, enum.Enum):
    NONE = 'none'
    HOUR_OF_DAY = 'hour'
    PER_INDIVIDUAL = 'individual'


class DecodeAlgorithm(str, enum.Enum):
    MAP = 'map'
    VITERBI = 'viterbi'


class CovariateTiming(str, enum.Enum):
    START = 'start'
    END = 'end'


METHOD_TRANSITION_MODE = {
    Method.PMM: TransitionMode.PH,
    Method.DT: TransitionMode.DT,
    Method.CT: TransitionMode.CT,
    Method.PH: TransitionMode.PH,
}

METHOD_LABELS = {
    Method.PMM: 'PMM',
    Method.DT: 'DT-HMM',
    Method.CT: 'CT-HMM',
    Method.PH: 'PH-HMM',
}
