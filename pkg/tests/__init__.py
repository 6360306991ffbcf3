"""Tests for the effzero package."""
