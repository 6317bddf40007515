"""Joint topology and outage estimation for radial distribution feeders."""

__version__ = "0.1.0"
