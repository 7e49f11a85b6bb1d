"""Multi-device neural ISP toolkit.

One network maps a single RAW mosaic to the color renditions of several
devices, conditioned on a device embedding.  The package also ships a
deterministic reference ISP and its inverse so that exactly-known ground
truth can be synthesized for training and verification.
"""

__version__ = "0.1.0"
