"""Layout quads, CAD alignment and object/layout relations for 3D scans."""

__version__ = "0.1.0"
