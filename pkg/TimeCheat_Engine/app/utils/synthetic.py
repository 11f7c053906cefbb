from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import logger
from app.errors import ConfigError
from app.models import Dataset, ISMTSInstance, Observation, TaskKind, resolve_task

ARRIVALS = ("uniform", "poisson")


@dataclass(frozen=True)
class GeneratorConfig:
    num_channels: int = 2
    num_instances: int = 64
    task: str = "classification"
    span: Tuple[float, float] = (0.0, 48.0)
    rate: float = 24.0
    rate_multipliers: Tuple[float, ...] = ()
    arrival: str = "uniform"
    time_grid: Optional[int] = None
    noise: float = 0.1
    amplitude: float = 1.0
    class_frequencies: Tuple[float, ...] = (1.0, 2.0)
    # class defined by the phase lag between channel 0 and the others
    phase_separated: bool = False
    class_phase_lags: Tuple[float, ...] = (np.pi / 2, -np.pi / 2)
    frequency_range: Tuple[float, float] = (0.5, 2.0)
    channel_lag: float = 0.5
    forecast_cutoff: float = 0.75
    horizon_steps: int = 3

    @property
    def task_kind(self) -> TaskKind:
        return resolve_task(self.task)

    @property
    def num_classes(self) -> int:
        if self.phase_separated:
            return len(self.class_phase_lags)
        return len(self.class_frequencies)

    def multipliers(self) -> np.ndarray:
        if not self.rate_multipliers:
            return np.ones(self.num_channels)
        return np.asarray(self.rate_multipliers, dtype=np.float64)

    def validate(self) -> "GeneratorConfig":
        if self.num_channels < 1:
            raise ConfigError(f"generator needs at least one channel, got {self.num_channels}")
        if self.num_instances < 1:
            raise ConfigError(f"generator needs at least one instance, got {self.num_instances}")
        if self.rate <= 0:
            raise ConfigError(f"observation rate must be positive, got {self.rate}")
        if self.rate_multipliers and len(self.rate_multipliers) != self.num_channels:
            raise ConfigError(
                f"{len(self.rate_multipliers)} rate multipliers given for {self.num_channels} channels"
            )
        if any(m < 0 for m in self.rate_multipliers):
            raise ConfigError("rate multipliers must be >= 0")
        if self.arrival not in ARRIVALS:
            raise ConfigError(f"unknown arrival process '{self.arrival}' (expected one of {ARRIVALS})")
        if self.time_grid is not None and self.time_grid < 1:
            raise ConfigError(f"time grid must have at least one step, got {self.time_grid}")
        if self.span[1] <= self.span[0]:
            raise ConfigError(f"invalid span {self.span}")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        task = self.task_kind
        if task is TaskKind.CLASSIFICATION and self.num_classes < 2:
            raise ConfigError("classification generators need at least two classes")
        if task is TaskKind.CLASSIFICATION and self.phase_separated and self.num_channels < 2:
            raise ConfigError("phase-separated classes need at least two channels")
        if task is TaskKind.FORECASTING:
            if not 0.0 < self.forecast_cutoff < 1.0:
                raise ConfigError(f"forecast cutoff must lie in (0, 1), got {self.forecast_cutoff}")
            if self.horizon_steps < 1:
                raise ConfigError(f"horizon steps must be positive, got {self.horizon_steps}")
        return self

    def to_dict(self) -> Dict:
        return {
            "num_channels": self.num_channels,
            "num_instances": self.num_instances,
            "task": self.task_kind.value,
            "span": list(self.span),
            "rate": self.rate,
            "rate_multipliers": list(self.rate_multipliers),
            "arrival": self.arrival,
            "time_grid": self.time_grid,
            "noise": self.noise,
        }


PRESETS: Dict[str, GeneratorConfig] = {
    "two-class": GeneratorConfig(),
    "multiclass": GeneratorConfig(num_channels=3, num_instances=96, class_frequencies=(1.0, 2.0, 3.0)),
    "correlated": GeneratorConfig(phase_separated=True, class_frequencies=(1.5,)),
    "interpolation": GeneratorConfig(num_channels=3, task="interpolation", rate=20.0, arrival="poisson"),
    "forecasting": GeneratorConfig(
        num_channels=3,
        task="forecasting",
        time_grid=48,
        rate=36.0,
        rate_multipliers=(1.0, 0.75, 0.5),
    ),
}


def resolve_preset(name: str, **overrides) -> GeneratorConfig:
    try:
        preset = PRESETS[name]
    except KeyError as exc:
        raise ConfigError(f"unknown generator preset '{name}' (expected one of {sorted(PRESETS)})") from exc
    return replace(preset, **overrides).validate()


# Draw observation times for one channel of one instance.
def _draw_times(config: GeneratorConfig, rng: np.random.Generator, channel_rate: float) -> np.ndarray:
    t_min, t_max = config.span
    if channel_rate <= 0:
        return np.empty(0)
    if config.time_grid is not None:
        steps = config.time_grid
        grid = t_min + (np.arange(steps) + 0.5) * (t_max - t_min) / steps
        keep = rng.uniform(size=steps) < min(1.0, channel_rate / steps)
        return grid[keep]
    if config.arrival == "poisson":
        gaps = rng.exponential((t_max - t_min) / channel_rate, size=int(4 * channel_rate) + 16)
        times = t_min + np.cumsum(gaps)
        return times[times < t_max]
    count = rng.poisson(channel_rate)
    return np.sort(rng.uniform(t_min, t_max, size=count))


def _signal(config: GeneratorConfig, label: Optional[int], rng: np.random.Generator):
    """Per-channel (frequency, phase) for one instance."""
    channels = config.num_channels
    base_phase = rng.uniform(0.0, 2 * np.pi)
    if config.task_kind is TaskKind.CLASSIFICATION:
        if config.phase_separated:
            frequency = np.full(channels, config.class_frequencies[0])
            lag = config.class_phase_lags[label]
            phases = base_phase + lag * np.arange(channels)
        else:
            frequency = np.full(channels, config.class_frequencies[label])
            phases = rng.uniform(0.0, 2 * np.pi, size=channels)
    else:
        low, high = config.frequency_range
        frequency = np.full(channels, rng.uniform(low, high))
        phases = base_phase + config.channel_lag * np.arange(channels)
    return frequency, phases


def generate_synthetic(config: GeneratorConfig, seed: int) -> Dataset:
    """Build a dataset from ``config``; identical for identical (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    task = config.task_kind
    t_min, t_max = config.span
    width = t_max - t_min
    rates = config.rate * config.multipliers()

    instances: List[ISMTSInstance] = []
    for index in range(config.num_instances):
        label = int(index % config.num_classes) if task is TaskKind.CLASSIFICATION else None
        frequency, phases = _signal(config, label, rng)
        observations = []
        for channel in range(config.num_channels):
            times = _draw_times(config, rng, rates[channel])
            angle = 2 * np.pi * frequency[channel] * (times - t_min) / width + phases[channel]
            values = config.amplitude * np.sin(angle) + config.noise * rng.standard_normal(len(times))
            observations.extend(
                Observation(channel=channel, time=float(t), value=float(v)) for t, v in zip(times, values)
            )
        instance = ISMTSInstance(observations=tuple(observations), span=config.span, label=label)
        if task is TaskKind.FORECASTING:
            cutoff = t_min + config.forecast_cutoff * width
            instance = forecasting_split(instance, cutoff, config.horizon_steps)
        instances.append(instance)

    if task is TaskKind.CLASSIFICATION:
        order = rng.permutation(len(instances))
        instances = [instances[i] for i in order]

    observed = np.zeros(config.num_channels, dtype=bool)
    for instance in instances:
        for obs in instance.observations:
            observed[obs.channel] = True
    if not observed.all():
        logger.warning("generated channels %s have no observations in any instance", np.flatnonzero(~observed).tolist())

    horizon = (1.0 - config.forecast_cutoff) * width if task is TaskKind.FORECASTING else None
    return Dataset(
        instances=tuple(instances),
        num_channels=config.num_channels,
        task=task,
        horizon=horizon,
        num_classes=config.num_classes if task is TaskKind.CLASSIFICATION else None,
        metadata={"generator": config.to_dict(), "seed": seed},
    )


def forecasting_split(instance: ISMTSInstance, cutoff: float, horizon_steps: int = 3) -> ISMTSInstance:
    """
    Keep observations at or before ``cutoff`` as the conditioning window; observations
    at the first ``horizon_steps`` distinct later timestamps become queries.
    """
    if horizon_steps < 1:
        raise ConfigError(f"horizon steps must be positive, got {horizon_steps}")
    t_min, _ = instance.span
    if cutoff <= t_min:
        raise ConfigError(f"cutoff {cutoff} must exceed the span start {t_min}")
    window = [obs for obs in instance.observations if obs.time <= cutoff]
    future = [obs for obs in instance.observations if obs.time > cutoff]
    horizon_times = sorted({obs.time for obs in future})[:horizon_steps]
    chosen = set(horizon_times)
    queries = [obs for obs in future if obs.time in chosen]
    return ISMTSInstance(
        observations=tuple(window),
        span=(t_min, cutoff),
        label=instance.label,
        queries=tuple(queries),
    )


def _sinusoid_power(times: np.ndarray, values: np.ndarray, frequency: float) -> float:
    if len(times) < 3:
        return 0.0
    design = np.stack(
        [np.sin(2 * np.pi * frequency * times), np.cos(2 * np.pi * frequency * times), np.ones_like(times)],
        axis=1,
    )
    coefficients, *_ = np.linalg.lstsq(design, values, rcond=None)
    fitted = design[:, :2] @ coefficients[:2]
    return float(np.sum(fitted * fitted))


def periodogram_classify(
    dataset: Dataset,
    frequencies: Sequence[float],
    span: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """
    Label each instance with the candidate frequency (cycles per span) whose least-squares
    sinusoid captures the most power, summed over channels.
    """
    predictions = np.zeros(len(dataset), dtype=np.int64)
    for index, instance in enumerate(dataset.instances):
        t_min, t_max = span if span is not None else instance.span
        width = (t_max - t_min) or 1.0
        powers = np.zeros(len(frequencies))
        for channel_obs in instance.by_channel(dataset.num_channels):
            if not channel_obs:
                continue
            times = (np.array([obs.time for obs in channel_obs]) - t_min) / width
            values = np.array([obs.value for obs in channel_obs])
            for k, frequency in enumerate(frequencies):
                powers[k] += _sinusoid_power(times, values, frequency)
        predictions[index] = int(np.argmax(powers))
    return predictions
