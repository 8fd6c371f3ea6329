"""Dual-domain adaptation for image super-resolution, in plain numpy.

A windowed-attention SR backbone is adapted to a new degradation by freezing
its shallow units, attaching LoRA adapters to the frozen query/value
projections and training a frequency-domain branch that predicts the HR
spectrum. Everything, autodiff and FFT included, runs on numpy.
"""

__version__ = "0.1.0"
