"""Watermark laundering toolkit."""
