"""Multiple-relaxation Runge-Kutta time stepping for systems with several invariants."""

__version__ = "0.1.0"
