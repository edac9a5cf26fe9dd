"""Single-photon versus weak-coherent-pulse BB84: simulator and secure-rate engine."""

__version__ = "0.1.0"
