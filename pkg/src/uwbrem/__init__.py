"""UWB range-error mitigation toolkit.

Trains a small residual 1D CNN on channel impulse response (CIR) vectors to
predict the ranging error of UWB measurements, quantizes it to 8-bit integers,
runs it with microcontroller-compatible integer arithmetic, and exports it as
an embeddable binary image / C source array.
"""

__version__ = "0.1.0"
