"""Test suite for clip-ada."""
