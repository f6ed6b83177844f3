"""Rain-fade forecasting from geostationary imagery, radar mosaics and beacon power."""

__version__ = "0.1.0"
