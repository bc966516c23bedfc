"""Dihedral-group (D4) augmentation of image/mask pairs.

The eight square symmetries: identity, counter-clockwise rotations by
90/180/270 degrees, horizontal and vertical flips, and the two diagonal
reflections. Conventions: rotations are counter-clockwise; ``flip_h``
mirrors columns (left/right), ``flip_v`` mirrors rows (top/bottom);
``flip_main_diag`` is the transpose and ``flip_anti_diag`` the
anti-transpose. The same element is always applied jointly to image,
mask and ignore mask.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .data.samples import SegmentationSample
from .errors import DimensionError

D4_ELEMENTS = (
    "identity",
    "rot90",
    "rot180",
    "rot270",
    "flip_h",
    "flip_v",
    "flip_main_diag",
    "flip_anti_diag",
)

# Elements that exchange the two spatial axes require square tiles.
_AXIS_SWAPPING = {"rot90", "rot270", "flip_main_diag", "flip_anti_diag"}


def _transform(element: str, array: np.ndarray) -> np.ndarray:
    """Apply one element to the leading two axes of an array."""
    if element == "identity":
        out = array
    elif element == "rot90":
        out = np.rot90(array, 1)
    elif element == "rot180":
        out = np.rot90(array, 2)
    elif element == "rot270":
        out = np.rot90(array, 3)
    elif element == "flip_h":
        out = array[:, ::-1]
    elif element == "flip_v":
        out = array[::-1, :]
    elif element == "flip_main_diag":
        out = np.swapaxes(array, 0, 1)
    elif element == "flip_anti_diag":
        out = np.swapaxes(array[::-1, ::-1], 0, 1)
    else:
        raise ValueError(f"unknown dihedral element {element!r}")
    return np.ascontiguousarray(out)


def transform_array(element: str, array: np.ndarray) -> np.ndarray:
    """Transform a single (H, W, ...) array; square required for axis-swapping elements."""
    if element not in D4_ELEMENTS:
        raise ValueError(f"unknown dihedral element {element!r}")
    if array.ndim < 2:
        raise DimensionError(f"expected an (H, W, ...) array, got shape {array.shape}")
    if element in _AXIS_SWAPPING and array.shape[0] != array.shape[1]:
        raise DimensionError(
            f"element {element!r} needs a square tile, got {array.shape[0]}x{array.shape[1]}"
        )
    return _transform(element, array)


def apply(element: str, sample: SegmentationSample) -> SegmentationSample:
    """Apply one dihedral element jointly to image, mask and ignore mask."""
    return SegmentationSample(
        image=transform_array(element, sample.image),
        mask=transform_array(element, sample.mask),
        ignore=None if sample.ignore is None else transform_array(element, sample.ignore),
        source_id=sample.source_id,
        origin=sample.origin,
    )


@lru_cache(maxsize=1)
def _tables() -> tuple[dict, dict]:
    """Cayley and inverse tables, derived by probing a marked 3x3 array."""
    probe = np.arange(9.0).reshape(3, 3)
    signature = {g: transform_array(g, probe).tobytes() for g in D4_ELEMENTS}
    compose_table, inverse_table = {}, {}
    for g in D4_ELEMENTS:
        for h in D4_ELEMENTS:
            combined = transform_array(g, transform_array(h, probe)).tobytes()
            matches = [k for k in D4_ELEMENTS if signature[k] == combined]
            assert len(matches) == 1
            compose_table[(g, h)] = matches[0]
            if matches[0] == "identity":
                inverse_table[g] = h
    return compose_table, inverse_table


def compose(g: str, h: str) -> str:
    """Element satisfying apply(compose(g, h), s) == apply(g, apply(h, s))."""
    table, _ = _tables()
    if (g, h) not in table:
        raise ValueError(f"unknown dihedral elements {g!r}, {h!r}")
    return table[(g, h)]


def inverse(g: str) -> str:
    _, table = _tables()
    if g not in table:
        raise ValueError(f"unknown dihedral element {g!r}")
    return table[g]


def sample_d4(rng: np.random.Generator) -> str:
    """Draw one element uniformly; reproducible for a seeded generator."""
    return D4_ELEMENTS[int(rng.integers(0, len(D4_ELEMENTS)))]
