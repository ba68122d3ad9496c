"""Acoustic ISAR imaging and skeleton/mesh reconstruction at desk scale."""

__version__ = "0.1.0"

# format identifiers and their schema versions, as printed by ``sonomesh --schema``
FORMATS = {
    "CBUF": 1, "PMTX": 1, "AIMG": 1, "REGP": 1, "FUSP": 1,
    "config": 1, "scene": 1, "joints": 1, "report": 1,
}
