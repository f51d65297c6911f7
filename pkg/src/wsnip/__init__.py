"""Neural-network interatomic potentials trained with empirical-potential supervision."""

__version__ = "0.1.0"
