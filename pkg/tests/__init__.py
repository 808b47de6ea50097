"""Test suite for the concept extraction toolkit."""
