from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DomainError
from .validation import check_cube


@dataclass(frozen=True, eq=False)
class RadianceCube:
    """Radiance samples laid out as ``(rows, cols, bands)``.

    ``crosstrack_ids`` gives the detector position of every column.  Negative
    radiances (sensor noise) are allowed and passed through untouched.
    """

    values: np.ndarray
    crosstrack_ids: np.ndarray | None = None
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        values = check_cube(self.values)
        object.__setattr__(self, "values", values)
        ids = self.crosstrack_ids
        ids = np.arange(values.shape[1]) if ids is None else np.asarray(ids, dtype=int)
        if ids.shape != (values.shape[1],):
            raise DomainError(
                f"crosstrack_ids length {ids.shape} does not match {values.shape[1]} columns"
            )
        object.__setattr__(self, "crosstrack_ids", ids)
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=float)
            if wl.shape != (values.shape[2],):
                raise DomainError("wavelengths length does not match band count")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def with_values(self, values, wavelengths=None) -> "RadianceCube":
        if wavelengths is None and self.wavelengths is not None and \
                np.shape(values)[-1] == self.bands:
            wavelengths = self.wavelengths
        return replace(self, values=values, wavelengths=wavelengths)

    def window(self, row0: int, col0: int, size_r: int, size_c: int) -> "RadianceCube":
        sl_r = slice(row0, row0 + size_r)
        sl_c = slice(col0, col0 + size_c)
        return RadianceCube(self.values[sl_r, sl_c], self.crosstrack_ids[sl_c], self.wavelengths)


def as_cube(x) -> RadianceCube:
    return x if isinstance(x, RadianceCube) else RadianceCube(x)
