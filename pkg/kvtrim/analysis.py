"""
Observation tools: singular value energy of attention matrices and magnitude maps of caches.
"""
import csv
import io
import logging

import numpy as np
from pydantic import BaseModel, root_validator

from kvtrim.attention import causal_attention_weights
from kvtrim.exceptions import FormatException, GuardException, ShapeException
from kvtrim.tensor import Matrix, svd_values

logger = logging.getLogger(__name__)

ENERGY_CSV_HEADER = ["index", "sigma", "energy", "cumulative"]
CHANNEL_CSV_HEADER = ["channel", "key", "value"]
FLOAT_FORMAT = ".17g"


class EnergySpectrum(BaseModel):
    sigma: np.ndarray
    energy: np.ndarray
    cumulative: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def validate_lengths(cls, values):
        sizes = {values["sigma"].size, values["energy"].size, values["cumulative"].size}
        if len(sizes) != 1:
            raise ValueError("sigma, energy and cumulative must have the same length")
        return values

    @classmethod
    def from_singular_values(cls, sigma) -> "EnergySpectrum":
        sigma = np.asarray(sigma, dtype=np.float64)
        squares = np.square(sigma)
        total = squares.sum()
        if total <= 0.0:
            raise GuardException("A zero matrix has no energy spectrum")
        energy = squares / total
        return cls(sigma=sigma, energy=energy, cumulative=np.cumsum(energy))

    def __len__(self):
        return self.sigma.size


def attention_energy(q: Matrix, k: Matrix, causal: bool = True) -> EnergySpectrum:
    """
    Energy spectrum of softmax(q k^T / sqrt(D)). Causal masking is applied by default; a
    masked attention matrix is lower-triangular with a positive diagonal and so never
    low-rank, pass ``causal=False`` to observe planted low-rank structure.
    """
    weights = causal_attention_weights(q, k, causal)
    spectrum = EnergySpectrum.from_singular_values(svd_values(weights))
    logger.debug("Top singular value of %s attention holds %.4f of the energy", weights.shape, spectrum.energy[0])
    return spectrum


def magnitude_map(cache: Matrix) -> Matrix:
    return np.abs(cache)


def channel_magnitudes(cache: Matrix) -> np.ndarray:
    """Mean absolute entry of every channel."""
    if cache.shape[0] == 0:
        return np.zeros(cache.shape[1], dtype=np.float64)
    return np.abs(cache).mean(axis=0)


def _number(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


def energy_csv(spectrum: EnergySpectrum) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ENERGY_CSV_HEADER)
    for index, (sigma, energy, cumulative) in enumerate(
        zip(spectrum.sigma, spectrum.energy, spectrum.cumulative)
    ):
        writer.writerow([index, _number(sigma), _number(energy), _number(cumulative)])
    return buffer.getvalue()


def parse_energy_csv(text: str) -> EnergySpectrum:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ENERGY_CSV_HEADER:
        raise FormatException(f"Energy CSV must start with the header {','.join(ENERGY_CSV_HEADER)}")
    try:
        table = np.array([[float(cell) for cell in row[1:]] for row in rows[1:]], dtype=np.float64)
        indices = [int(row[0]) for row in rows[1:]]
    except (ValueError, IndexError) as e:
        raise FormatException(f"Malformed energy CSV row: {e}") from e
    if indices != list(range(len(indices))) or (table.size and table.shape[1] != 3):
        raise FormatException("Energy CSV rows must be numbered 0..n-1 with three values each")
    table = table.reshape(-1, 3)
    return EnergySpectrum(sigma=table[:, 0], energy=table[:, 1], cumulative=table[:, 2])


def magnitude_csv(cache: Matrix) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in magnitude_map(cache):
        writer.writerow([_number(value) for value in row])
    return buffer.getvalue()


def channel_profile_csv(keys: Matrix, values: Matrix) -> str:
    """
    One row per channel with the mean |entry| of the key and value caches, so outlier
    channels stand out without reading the full magnitude maps.
    """
    if keys.shape[1] != values.shape[1]:
        raise ShapeException(f"Keys {keys.shape} and values {values.shape} differ in channels")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CHANNEL_CSV_HEADER)
    for channel, (key, value) in enumerate(zip(channel_magnitudes(keys), channel_magnitudes(values))):
        writer.writerow([channel, _number(key), _number(value)])
    return buffer.getvalue()


class HeadAnalysis(BaseModel):
    layer: int
    head: int
    spectrum: EnergySpectrum
    keys: np.ndarray
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @property
    def suffix(self) -> str:
        return f"l{self.layer}_h{self.head}.csv"
