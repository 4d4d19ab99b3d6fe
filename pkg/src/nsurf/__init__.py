"""Online neural-surfel reconstruction and rasterization-guided rendering."""

__version__ = "0.1.0"
