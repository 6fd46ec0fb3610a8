"""gfflab - Gaussian free field level-set cluster laboratory."""

__version__ = "0.1.0"
