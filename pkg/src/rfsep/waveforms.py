"""LPI radar waveform synthesis.

Six intrapulse modulations (Frank, P1, Costas for training; P3, Barker and
linear chirp for testing) combined with five interpulse patterns. All
signals are real passband sequences sampled at 50 MHz with unit amplitude.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError

SAMPLE_RATE = 50e6
LIBRARY_LENGTH = 10**6

US = 1e-6
MHZ = 1e6


class Intrapulse(str, enum.Enum):
    FRANK = "frank"
    P1 = "p1"
    COSTAS = "costas"
    P3 = "p3"
    BARKER = "barker"
    CHIRP = "chirp"


class Interpulse(str, enum.Enum):
    CW = "cw"
    CONSTANT = "constant"
    STAGGER = "stagger"
    JITTER = "jitter"
    DWELL_SWITCH = "dwell_switch"


TRAIN_KINDS = (Intrapulse.FRANK, Intrapulse.P1, Intrapulse.COSTAS)
TEST_KINDS = (Intrapulse.P3, Intrapulse.BARKER, Intrapulse.CHIRP)

# waveform parameter ranges, sampled uniformly
PW_RANGE = (4 * US, 50 * US)
PRI_EXTRA_RANGE = (50 * US, 400 * US)
CARRIER_RANGE = (3 * MHZ, 23 * MHZ)
COSTAS_BW_RANGE = (5 * MHZ, 23 * MHZ)
CHIRP_START_RANGE = (3 * MHZ, 15 * MHZ)
CHIRP_MIN_BW = 2 * MHZ
CHIRP_MAX_STOP = 23 * MHZ
FRANK_P1_LENGTHS = tuple(range(3, 9))
P3_LENGTHS = tuple(range(3, 21))
BARKER_LENGTHS = (2, 3, 4, 5, 7, 11, 13)
COSTAS_LENGTHS = (3, 4, 5, 6, 8, 9, 10)

# Costas hop band sits inside [lower edge, upper edge); the parameter table gives no
# frequency for Costas, only a bandwidth.
COSTAS_BAND_EDGES = (1 * MHZ, 24 * MHZ)

CODE_LENGTHS = {
    Intrapulse.FRANK: FRANK_P1_LENGTHS,
    Intrapulse.P1: FRANK_P1_LENGTHS,
    Intrapulse.P3: P3_LENGTHS,
    Intrapulse.BARKER: BARKER_LENGTHS,
    Intrapulse.COSTAS: COSTAS_LENGTHS,
}

_BARKER = {
    2: "+-",
    3: "++-",
    4: "++-+",
    5: "+++-+",
    7: "+++--+-",
    11: "+++---+--+-",
    13: "+++++--++-+-+",
}

# Welch arrays (exponential construction, primes 5, 7, 11) with corner dots
# removed where needed to reach the supported lengths.
_COSTAS_BASE = {
    3: (0, 2, 1),
    4: (0, 1, 3, 2),
    5: (1, 0, 4, 2, 3),
    6: (0, 2, 1, 5, 3, 4),
    8: (1, 5, 2, 7, 6, 4, 0, 3),
    9: (0, 2, 6, 3, 8, 7, 5, 1, 4),
    10: (0, 1, 3, 7, 4, 9, 8, 6, 2, 5),
}


def _dihedral_images(perm):
    """All distinct images of a permutation array under the 8 square symmetries."""
    n = len(perm)
    p = np.asarray(perm)
    images = set()
    for q in (p, np.argsort(p)):
        for r in (q, q[::-1]):
            for s in (r, n - 1 - r):
                images.add(tuple(int(v) for v in s))
    return sorted(images)


COSTAS_TABLE = {n: _dihedral_images(base) for n, base in _COSTAS_BASE.items()}


def is_costas(order: Sequence[int]) -> bool:
    """True when all displacement vectors between dots of the array are distinct."""
    seen = set()
    for (i, a), (j, b) in itertools.combinations(enumerate(order), 2):
        vec = (j - i, b - a)
        if vec in seen:
            return False
        seen.add(vec)
    return sorted(order) == list(range(len(order)))


@dataclass(frozen=True)
class PhaseCode:
    phases: np.ndarray

    @property
    def length(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class WaveformSpec:
    """Sampled parameters of one emitter.

    ``bandwidth`` is only meaningful for Costas and chirp signals and is 0
    otherwise. ``hop_order`` holds the Costas frequency-hop permutation.
    """

    intrapulse_kind: Intrapulse
    interpulse_kind: Interpulse
    pulse_width: float
    pri_base: float
    carrier_or_start_freq: float
    bandwidth: float = 0.0
    code_length: int = 1
    seed: int = 0
    hop_order: Optional[tuple] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrapulse_kind"] = self.intrapulse_kind.value
        d["interpulse_kind"] = self.interpulse_kind.value
        d["hop_order"] = list(self.hop_order) if self.hop_order is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WaveformSpec":
        hop = d.get("hop_order")
        return cls(
            intrapulse_kind=Intrapulse(d["intrapulse_kind"]),
            interpulse_kind=Interpulse(d["interpulse_kind"]),
            pulse_width=float(d["pulse_width"]),
            pri_base=float(d["pri_base"]),
            carrier_or_start_freq=float(d["carrier_or_start_freq"]),
            bandwidth=float(d.get("bandwidth", 0.0)),
            code_length=int(d.get("code_length", 1)),
            seed=int(d.get("seed", 0)),
            hop_order=tuple(hop) if hop is not None else None,
        )


@dataclass(frozen=True)
class TimeSignal:
    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE

    @property
    def length(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class InterpulseConfig:
    """Agility parameters for the PRI patterns whose values are not fixed by the parameter ranges."""

    stagger_levels: tuple = (2, 4)
    jitter_fraction: float = 0.1
    dwell_levels: tuple = (2, 4)
    dwell_pulses: tuple = (4, 16)


DEFAULT_INTERPULSE = InterpulseConfig()


def phase_code(kind, code_length: int) -> PhaseCode:
    """Chip phases (radians) of a polyphase or binary code.

    Frank and P1 codes of length ``M`` have ``M**2`` chips, ordered with the
    outer index varying slowest. P3 and Barker codes have ``code_length``
    chips.
    """
    kind = Intrapulse(kind)
    m = int(code_length)
    if kind in (Intrapulse.FRANK, Intrapulse.P1):
        if m < 1:
            raise ParameterError(f"{kind.value} code length must be >= 1, got {m}")
        i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        if kind is Intrapulse.FRANK:
            phi = 2 * np.pi * i * j / m
        else:
            # group n = i + 1 (outer), chip k = j + 1 (inner)
            phi = -(np.pi / m) * (m - (2 * i + 1)) * (i * m + j)
        return PhaseCode(phi.reshape(-1).astype(float))
    if kind is Intrapulse.P3:
        if m < 1:
            raise ParameterError(f"P3 code length must be >= 1, got {m}")
        n = np.arange(m)
        return PhaseCode(np.pi * n**2 / m)
    if kind is Intrapulse.BARKER:
        if m not in _BARKER:
            raise ParameterError(f"no Barker code of length {m}; supported {sorted(_BARKER)}")
        return PhaseCode(np.array([0.0 if c == "+" else np.pi for c in _BARKER[m]]))
    raise ParameterError(f"{kind.value} is not a phase-coded waveform")


def barker_sequence(code_length: int) -> np.ndarray:
    """Barker code as a +/-1 sequence."""
    return np.round(np.cos(phase_code(Intrapulse.BARKER, code_length).phases)).astype(int)


def costas_sequence(code_length: int, rng=None) -> tuple:
    """A Costas frequency-hop order of the given length.

    Without ``rng`` the stored Welch array is returned; otherwise one of its
    symmetry images is chosen uniformly.
    """
    if code_length not in COSTAS_TABLE:
        raise ParameterError(
            f"Costas length {code_length} not in {sorted(COSTAS_TABLE)}"
        )
    if rng is None:
        return _COSTAS_BASE[code_length]
    table = COSTAS_TABLE[code_length]
    return table[int(rng.integers(len(table)))]


def _chip_index(n_samples: int, n_chips: int) -> np.ndarray:
    # chip k covers samples [round(k n / K), round((k+1) n / K))
    bounds = np.round(np.arange(1, n_chips) * n_samples / n_chips).astype(int)
    return np.searchsorted(bounds, np.arange(n_samples), side="right")


def synth_pulse(spec: WaveformSpec, sample_rate: float = SAMPLE_RATE) -> TimeSignal:
    """One rectangular-envelope pulse of length ``round(PW * fs)``."""
    n = int(round(spec.pulse_width * sample_rate))
    if n < 1:
        raise ParameterError("pulse shorter than one sample")
    t = np.arange(n) / sample_rate
    kind = spec.intrapulse_kind
    f0 = spec.carrier_or_start_freq

    if kind is Intrapulse.CHIRP:
        rate = spec.bandwidth / spec.pulse_width
        x = np.cos(2 * np.pi * (f0 * t + 0.5 * rate * t**2))
    elif kind is Intrapulse.COSTAS:
        order = spec.hop_order or costas_sequence(spec.code_length)
        if len(order) != spec.code_length:
            raise ParameterError("hop_order length differs from code_length")
        if n < len(order):
            raise ParameterError(f"{n} samples cannot hold {len(order)} hops")
        step = spec.bandwidth / len(order)
        freqs = f0 + (np.asarray(order) + 0.5) * step
        idx = _chip_index(n, len(order))
        x = np.cos(2 * np.pi * freqs[idx] * t)
    else:
        phases = phase_code(kind, spec.code_length).phases
        if n < len(phases):
            raise ParameterError(f"{n} samples cannot hold {len(phases)} chips")
        idx = _chip_index(n, len(phases))
        x = np.cos(2 * np.pi * f0 * t + phases[idx])
    return TimeSignal(x, sample_rate)


def _draw_pri(pw: float, rng: np.random.Generator) -> float:
    # PRI ~ U[2PW, 2PW + X) with X ~ U[50, 400) us
    extra = rng.uniform(*PRI_EXTRA_RANGE)
    return rng.uniform(2 * pw, 2 * pw + extra)


def pulse_toas(
    spec: WaveformSpec,
    total_len: int,
    rng: np.random.Generator,
    sample_rate: float = SAMPLE_RATE,
    config: InterpulseConfig = DEFAULT_INTERPULSE,
) -> np.ndarray:
    """Pulse start indices (samples) inside ``[0, total_len)``."""
    pw_n = int(round(spec.pulse_width * sample_rate))
    kind = spec.interpulse_kind
    if kind is Interpulse.CW:
        return np.arange(0, total_len, pw_n)

    pri = spec.pri_base
    if kind is Interpulse.CONSTANT:
        pattern = [pri]
    elif kind is Interpulse.STAGGER:
        k = int(rng.integers(config.stagger_levels[0], config.stagger_levels[1] + 1))
        pattern = [_draw_pri(spec.pulse_width, rng) for _ in range(k)]
    elif kind is Interpulse.DWELL_SWITCH:
        k = int(rng.integers(config.dwell_levels[0], config.dwell_levels[1] + 1))
        pattern = []
        for _ in range(k):
            level = _draw_pri(spec.pulse_width, rng)
            hold = int(rng.integers(config.dwell_pulses[0], config.dwell_pulses[1] + 1))
            pattern.extend([level] * hold)
    elif kind is Interpulse.JITTER:
        pattern = None
    else:  # pragma: no cover
        raise ParameterError(f"unknown interpulse kind {kind}")

    # upper bound on the number of pulses that fit
    n_max = int(np.ceil(total_len / (0.5 * pri * sample_rate))) + 2
    if pattern is None:
        frac = config.jitter_fraction
        intervals = pri * (1 + rng.uniform(-frac, frac, size=n_max))
    else:
        reps = int(np.ceil(n_max / len(pattern)))
        intervals = np.tile(pattern, reps)[:n_max]
    steps = np.maximum(np.round(np.asarray(intervals) * sample_rate).astype(np.int64), pw_n)
    first = int(rng.integers(0, steps[0]))
    toas = first + np.concatenate([[0], np.cumsum(steps[:-1])])
    return toas[toas < total_len]


def apply_interpulse(
    pulse: TimeSignal,
    spec: WaveformSpec,
    total_len: int,
    rng: np.random.Generator,
    config: InterpulseConfig = DEFAULT_INTERPULSE,
) -> TimeSignal:
    """Place pulse copies at the TOAs of the interpulse pattern, zeros between."""
    p = pulse.samples
    if total_len < len(p):
        raise ParameterError("total length shorter than one pulse")
    out = np.zeros(total_len)
    for toa in pulse_toas(spec, total_len, rng, pulse.sample_rate, config):
        stop = min(toa + len(p), total_len)
        out[toa:stop] = p[: stop - toa]
    return TimeSignal(out, pulse.sample_rate)


def synthesize(
    spec: WaveformSpec,
    length: int = LIBRARY_LENGTH,
    sample_rate: float = SAMPLE_RATE,
    config: InterpulseConfig = DEFAULT_INTERPULSE,
) -> TimeSignal:
    """Full pulse train for ``spec``; a pure function of the spec (including its seed)."""
    pulse = synth_pulse(spec, sample_rate)
    rng = np.random.default_rng(spec.seed)
    return apply_interpulse(pulse, spec, length, rng, config)


def sample_spec(kind, rng: np.random.Generator) -> WaveformSpec:
    """Draw a spec uniformly over the parameter ranges for ``kind``."""
    kind = Intrapulse(kind)
    pw = rng.uniform(*PW_RANGE)
    pri = _draw_pri(pw, rng)
    bandwidth = 0.0
    hop_order = None
    if kind is Intrapulse.COSTAS:
        bandwidth = rng.uniform(*COSTAS_BW_RANGE)
        lo, hi = COSTAS_BAND_EDGES
        freq = rng.uniform(lo, hi - bandwidth)
        code_length = int(rng.choice(COSTAS_LENGTHS))
        hop_order = costas_sequence(code_length, rng)
    elif kind is Intrapulse.CHIRP:
        freq = rng.uniform(*CHIRP_START_RANGE)
        bandwidth = rng.uniform(CHIRP_MIN_BW, CHIRP_MAX_STOP - freq)
        code_length = 1
    else:
        freq = rng.uniform(*CARRIER_RANGE)
        code_length = int(rng.choice(CODE_LENGTHS[kind]))
    interpulse = list(Interpulse)[int(rng.integers(len(Interpulse)))]
    return WaveformSpec(
        intrapulse_kind=kind,
        interpulse_kind=interpulse,
        pulse_width=pw,
        pri_base=pri,
        carrier_or_start_freq=freq,
        bandwidth=bandwidth,
        code_length=code_length,
        seed=int(rng.integers(0, 2**63)),
        hop_order=hop_order,
    )


def nominal_band(spec: WaveformSpec) -> tuple:
    """(lowest, highest) instantaneous frequency the synthesis emits, in Hz."""
    f0 = spec.carrier_or_start_freq
    if spec.intrapulse_kind is Intrapulse.CHIRP:
        return f0, f0 + spec.bandwidth
    if spec.intrapulse_kind is Intrapulse.COSTAS:
        step = spec.bandwidth / spec.code_length
        return f0 + 0.5 * step, f0 + spec.bandwidth - 0.5 * step
    return f0, f0


@dataclass
class LibraryPlan:
    kinds: tuple
    count: int
    length: int = LIBRARY_LENGTH
    seed: int = 0
    extra: dict = field(default_factory=dict)


TRAIN_PLAN = LibraryPlan(kinds=TRAIN_KINDS, count=2000, seed=1)
TEST_PLAN = LibraryPlan(kinds=TEST_KINDS, count=1000, seed=2)


def _one_sample(kind, length, seed_seq, sample_rate):
    rng = np.random.default_rng(seed_seq)
    spec = sample_spec(kind, rng)
    return synthesize(spec, length, sample_rate), spec


def generate_library(
    kind,
    count: int,
    length: int = LIBRARY_LENGTH,
    rng=None,
    out_dir=None,
    workers: int = 1,
    sample_rate: float = SAMPLE_RATE,
):
    """Generate ``count`` signals of one intrapulse kind.

    Each sample draws from its own child seed sequence, so the result does
    not depend on ``workers``. With ``out_dir`` the signals are written as
    raw float32 files and listed in the directory manifest.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    kind = Intrapulse(kind)
    if isinstance(rng, np.random.Generator):
        children = rng.bit_generator.seed_seq.spawn(count)
    else:
        children = np.random.SeedSequence(rng).spawn(count)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            items = list(
                pool.map(lambda s: _one_sample(kind, length, s, sample_rate), children)
            )
    else:
        items = [_one_sample(kind, length, s, sample_rate) for s in children]

    if out_dir is not None:
        from .signal_io import write_library

        write_library(out_dir, kind.value, items)
    return items
