"""Test suite for ELAS."""
