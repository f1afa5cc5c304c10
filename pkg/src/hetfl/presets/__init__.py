"""Shipped experiment presets (INI data files)."""
