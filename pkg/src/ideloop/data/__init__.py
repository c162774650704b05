"""Shipped fixtures and schemas."""
