"""gridflow: dc-OPF learning toolkit with topology-masked graph networks.

Parsing and file formats live in `case_io`, topology linear algebra in
`grid_model`, eigen-stability analysis in `spectral`, the OPF solver and
dataset generation in `opf`, models/losses/optimizer in `nn` (backed by the
`autodiff` engine), and experiment orchestration in `experiments`.
"""

__version__ = "0.1.0"

from . import autodiff, case_io, errors, experiments, grid_model, nn, opf, spectral  # noqa: F401
