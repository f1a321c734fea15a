"""Committee BFT consensus with EdDSA and BLS multi-signature certificates."""

__version__ = "0.1.0"
