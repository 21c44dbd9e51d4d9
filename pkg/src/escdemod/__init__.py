"""Demodulation-signal synthesis for extremum seeking control.

Build extended dithers from a derivative basis, test whether a demodulator
exists, synthesize it, estimate derivatives from single perturbed cost
measurements, and drive gradient, heavy-ball, Newton and unicycle seekers.
"""

__version__ = "0.1.0"
