"""Ultra-low bitrate semantic communication link simulator.

Two transmit branches (a codebook-quantized saliency-map codec and a
transformer text JSCC codec) over an AWGN channel, with metrics,
overhead accounting, and SNR-sweep experiments.
"""

__version__ = "0.1.0"
