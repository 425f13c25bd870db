"""
BiFAMP Instance Service
Planted instance generation and the binary instance file

Factor matrices are stored in scaled units r0 = sqrt(N) F0, so Z = r0 X0 / sqrt(N).
Every random quantity comes from its own substream of the seed:

    0  F0 and X0
    1  completion mask / factor-analysis row variances
    2  channel noise
    3  calibration estimate w'
    4  solver initialization (AMP, relaxed BP)
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from bifamp.core.errors import InvalidArgumentError
from bifamp.core.io import atomic_write
from bifamp.schemas.problem import Application, ProblemSpec, round_half_up
from bifamp.services.channels import sample_output
from bifamp.services.factory import output_channel, signal_prior

logger = logging.getLogger(__name__)

MAGIC = b"BIFAMP\0\0"
FORMAT_VERSION = 1

STREAM_PLANTED = 0
STREAM_STRUCTURE = 1
STREAM_NOISE = 2
STREAM_ESTIMATE = 3
STREAM_SOLVER = 4


def substream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream), stable across runs and workers."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


@dataclass(frozen=True, eq=False)
class Instance:
    """One planted instance; arrays are read-only once built"""
    problem: ProblemSpec
    n: int
    seed: int
    F0: np.ndarray                    # M x N, scaled
    X0: np.ndarray                    # N x P
    Y: np.ndarray                     # M x P
    mask: Optional[np.ndarray] = None      # M x P bool, completion only
    psi: Optional[np.ndarray] = None       # M, factor analysis only
    w_prime: Optional[np.ndarray] = None   # M x N scaled estimate, calibration only
    realized: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("F0", "X0", "Y", "mask", "psi", "w_prime"):
            value = getattr(self, name)
            if value is not None:
                value.setflags(write=False)

    @property
    def m(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def Z0(self) -> np.ndarray:
        return self.F0 @ self.X0 / np.sqrt(self.n)


def _row_variances(spec: ProblemSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    """Exact class counts (largest remainder), rows shuffled."""
    weights = np.asarray(spec.weights)
    counts = np.floor(weights * m).astype(int)
    short = m - counts.sum()
    if short:
        order = np.argsort(-(weights * m - counts), kind="stable")
        counts[order[:short]] += 1
    rows = np.repeat(np.asarray(spec.psi, dtype=float), counts)
    return rng.permutation(rows)


def generate(problem: ProblemSpec, n: int, seed: int) -> Instance:
    """
    Sample F0, X0 from the priors and Y from the channel.

    Args:
        problem: experiment description
        n: latent dimension N (>= 2)
        seed: nonnegative integer seed

    Returns:
        Instance with M = round(alpha N), P = round(pi N), ties up
    """
    if n < 2:
        raise InvalidArgumentError(f"N must be at least 2, got {n}")
    if seed < 0:
        raise InvalidArgumentError("seed must be nonnegative")
    m, p = problem.dims(n)
    if m < 1 or p < 1:
        raise InvalidArgumentError(f"dimensions M={m}, P={p} are empty for N={n}")

    planted = substream(seed, STREAM_PLANTED)
    F0 = planted.standard_normal((m, n))
    X0 = np.asarray(signal_prior(problem).sample(planted, (n, p)), dtype=float)

    mask = None
    psi = None
    structure = substream(seed, STREAM_STRUCTURE)
    if problem.application is Application.COMPLETION:
        known = round_half_up(problem.eps * m * p)
        mask = np.zeros(m * p, dtype=bool)
        mask[structure.choice(m * p, size=known, replace=False)] = True
        mask = mask.reshape(m, p)
    elif problem.application is Application.FACTOR_ANALYSIS:
        psi = _row_variances(problem, m, structure)

    w_prime = None
    if problem.application in (Application.CALIBRATION, Application.CS):
        eta = problem.eta_value
        xi = substream(seed, STREAM_ESTIMATE).standard_normal((m, n))
        w_prime = F0.copy() if eta == 0.0 else (F0 + np.sqrt(eta) * xi) / np.sqrt(1.0 + eta)

    channel = output_channel(problem, mask=mask, psi_rows=psi)
    Y = sample_output(channel, F0 @ X0 / np.sqrt(n), substream(seed, STREAM_NOISE))

    realized = {"alpha": m / n, "pi": p / n}
    logger.debug("generated %s instance N=%d M=%d P=%d seed=%d", problem.application.value, n, m, p, seed)
    return Instance(problem, n, seed, F0, X0, Y, mask, psi, w_prime, realized)


# ---------------------------------------------------------------------------
# Binary file
# ---------------------------------------------------------------------------

def _arrays(instance: Instance) -> list[tuple[str, np.ndarray]]:
    arrays = [("F0", instance.F0), ("X0", instance.X0), ("Y", instance.Y)]
    if instance.mask is not None:
        arrays.append(("mask", instance.mask.astype("<f8")))
    if instance.psi is not None:
        arrays.append(("psi", instance.psi))
    if instance.w_prime is not None:
        arrays.append(("w_prime", instance.w_prime))
    return arrays


def encode_instance(instance: Instance) -> bytes:
    arrays = _arrays(instance)
    header = {
        "problem": instance.problem.model_dump(mode="json"),
        "n": instance.n,
        "m": instance.m,
        "p": instance.p,
        "seed": instance.seed,
        "arrays": [{"name": name, "shape": list(a.shape), "dtype": "<f8"} for name, a in arrays],
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C") for _, a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(text)) + text + body


def decode_instance(data: bytes) -> Instance:
    if data[:8] != MAGIC:
        raise InvalidArgumentError("not a BiFAMP instance file")
    version, length = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported instance format version {version}")
    offset = 16 + length
    header = json.loads(data[16:offset].decode("utf-8"))

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise InvalidArgumentError("instance file has trailing or missing bytes")

    mask = arrays.get("mask")
    problem = ProblemSpec.model_validate(header["problem"])
    n, m, p = header["n"], header["m"], header["p"]
    return Instance(
        problem=problem,
        n=n,
        seed=header["seed"],
        F0=arrays["F0"],
        X0=arrays["X0"],
        Y=arrays["Y"],
        mask=None if mask is None else mask.astype(bool),
        psi=arrays.get("psi"),
        w_prime=arrays.get("w_prime"),
        realized={"alpha": m / n, "pi": p / n},
    )


def save_instance(instance: Instance, path: Union[str, Path]) -> Path:
    return atomic_write(path, encode_instance(instance))


def load_instance(path: Union[str, Path]) -> Instance:
    return decode_instance(Path(path).read_bytes())
