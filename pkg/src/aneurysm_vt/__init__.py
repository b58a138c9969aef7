"""Desk-scale virtual treatment simulator for cerebral aneurysms."""
__version__ = "0.1.0"
