"""Desk-scale rendezvous and docking GNC simulation stack."""

__version__ = "0.1.0"
