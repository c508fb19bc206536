"""Surface-plasmon modes on a dielectric / negative-index interface and a
Raman-echo quantum memory driven by them."""

__version__ = "0.1.0"
