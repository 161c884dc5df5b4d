"""Per-Gaussian baked hemisphere records and their binary cache format.

Cache layout (little-endian)::

    magic      8 bytes  b"SVGMBUF1"
    count      uint64   number of Gaussians G
    k          uint64   samples per Gaussian K
    records    G*K records, Gaussian-major, each 74 bytes:
        direction   3 x float64
        l_ind       3 x float64
        trans       float64
        vis         uint8
        first_hit   int64   (-1 = no hit)
        first_uv    2 x float64  (NaN when there is no hit)
        pad         1 byte
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError

NONE = -1
MAGIC = b"SVGMBUF1"
RECORD_DTYPE = np.dtype([
    ("direction", "<f8", (3,)),
    ("l_ind", "<f8", (3,)),
    ("trans", "<f8"),
    ("vis", "u1"),
    ("first_hit", "<i8"),
    ("first_uv", "<f8", (2,)),
    ("pad", "u1"),
])


@dataclass
class MicroSample:
    direction: np.ndarray
    l_ind: np.ndarray
    trans: float
    vis: int
    first_hit: int
    first_uv: np.ndarray


@dataclass
class MicroBuffer:
    """K records of one Gaussian."""

    directions: np.ndarray
    l_ind: np.ndarray
    trans: np.ndarray
    vis: np.ndarray
    first_hit: np.ndarray
    first_uv: np.ndarray

    def __len__(self) -> int:
        return self.directions.shape[0]

    def __getitem__(self, k: int) -> MicroSample:
        return MicroSample(self.directions[k], self.l_ind[k], float(self.trans[k]), int(self.vis[k]),
                           int(self.first_hit[k]), self.first_uv[k])


@dataclass
class MicroBuffers:
    """Records for all Gaussians, stacked as (G, K, ...) arrays."""

    directions: np.ndarray
    l_ind: np.ndarray
    trans: np.ndarray
    vis: np.ndarray
    first_hit: np.ndarray
    first_uv: np.ndarray

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def k(self) -> int:
        return self.directions.shape[1]

    def __getitem__(self, i: int) -> MicroBuffer:
        return MicroBuffer(self.directions[i], self.l_ind[i], self.trans[i], self.vis[i],
                           self.first_hit[i], self.first_uv[i])

    def invariant_violations(self) -> list[str]:
        out = []
        if np.any((self.vis == 1) != (self.trans > 0.8)):
            out.append("visibility disagrees with the transmittance threshold")
        if np.any((self.trans < 0) | (self.trans > 1)):
            out.append("transmittance outside [0, 1]")
        none = self.first_hit == NONE
        if np.any(self.l_ind[none] != 0):
            out.append("records without a hit carry indirect radiance")
        if np.any(~np.isnan(self.first_uv[none])):
            out.append("records without a hit carry tangent coordinates")
        if np.any(self.l_ind < 0):
            out.append("negative indirect radiance")
        return out


def save_microbuffers(path, mb: MicroBuffers) -> None:
    g, k = mb.directions.shape[:2]
    rec = np.zeros(g * k, dtype=RECORD_DTYPE)
    rec["direction"] = mb.directions.reshape(-1, 3)
    rec["l_ind"] = mb.l_ind.reshape(-1, 3)
    rec["trans"] = mb.trans.reshape(-1)
    rec["vis"] = mb.vis.reshape(-1)
    rec["first_hit"] = mb.first_hit.reshape(-1)
    rec["first_uv"] = mb.first_uv.reshape(-1, 2)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([g, k], dtype="<u8").tobytes())
        fh.write(rec.tobytes())


def load_microbuffers(path) -> MicroBuffers:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InvalidParameterError(f"{path}: not a micro-buffer cache")
    if len(data) < 24:
        raise InvalidParameterError(f"{path}: truncated header")
    g, k = (int(x) for x in np.frombuffer(data[8:24], dtype="<u8"))
    body = data[24:]
    if len(body) != g * k * RECORD_DTYPE.itemsize:
        raise InvalidParameterError(f"{path}: expected {g * k} records of {RECORD_DTYPE.itemsize} bytes, "
                                    f"found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return MicroBuffers(
        rec["direction"].reshape(g, k, 3).astype(np.float64),
        rec["l_ind"].reshape(g, k, 3).astype(np.float64),
        rec["trans"].reshape(g, k).astype(np.float64),
        rec["vis"].reshape(g, k).astype(np.uint8),
        rec["first_hit"].reshape(g, k).astype(np.int64),
        rec["first_uv"].reshape(g, k, 2).astype(np.float64),
    )
