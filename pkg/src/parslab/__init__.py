"""Desk-scale laboratory for reward scaling with layer norm and infeasible-action penalties."""

__version__ = "0.1.0"
