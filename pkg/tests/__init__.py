"""Tests for the envfield package."""
