"""Four-dimensional geometrically shaped modulation: formats, GMI, shaping, FEC and fiber simulation."""

from prs4d.constellation import (
    Constellation4D,
    PrsParams,
    get_format,
    load_constellation,
    make_2a8psk_6b,
    make_pm8qam,
    make_prs64,
)

__version__ = "0.1.0"

__all__ = [
    "Constellation4D",
    "PrsParams",
    "get_format",
    "load_constellation",
    "make_2a8psk_6b",
    "make_pm8qam",
    "make_prs64",
]
