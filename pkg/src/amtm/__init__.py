"""Fluid-level simulation and link pricing for asynchronous multi-class WAN traffic engineering."""
