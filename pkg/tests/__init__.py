"""Tests for the MDPS anomaly detector."""
