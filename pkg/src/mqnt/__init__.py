"""mqnt: weight/activation quantization toolkit and benchmark harness
for small decoder-only language models.

Calibration-set construction under controlled distribution shift,
composable layer quantizers (RTN, GPTQ-style error compensation,
sensitivity-based outlier extraction, activation-aware and smoothing
scale migration), and zero/few-shot plus perplexity evaluation, all in
plain numpy.
"""

__version__ = "0.1.0"
