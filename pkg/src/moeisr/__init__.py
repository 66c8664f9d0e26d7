"""Pixel-wise mixture-of-experts decoding for arbitrary-scale super-resolution."""
