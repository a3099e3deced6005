"""Oblivious video delivery over untrusted edge storage."""
