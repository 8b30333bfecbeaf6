"""Label-free BEV data generation, reference losses and SSC evaluation, with a synthetic oracle."""

__version__ = "0.1.0"
