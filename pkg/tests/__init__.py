"""Tests for gfflab."""
