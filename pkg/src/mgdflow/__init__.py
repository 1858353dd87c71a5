"""Modular grad-div stabilized BDF2 solver for the 2D incompressible Navier-Stokes equations."""

__version__ = "0.1.0"
