"""Numerical and orchestration services for gfflab."""
