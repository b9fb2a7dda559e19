"""Finite-runtime adiabatic Berry-phase simulation."""
