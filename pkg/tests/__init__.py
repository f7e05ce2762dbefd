"""Unit tests for the cellsearch project."""
