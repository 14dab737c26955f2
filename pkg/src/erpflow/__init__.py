"""Electron-redistribution reaction prediction with sequential experts and MC-dropout sampling."""

__version__ = "0.1.0"
