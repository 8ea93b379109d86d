"""qana: a quantization-aware CNN with a rate-coded spiking inference path.

The package trains a compact attention-augmented convolutional classifier,
folds and quantizes it into an integer spiking network, simulates that network
event-by-event, and decodes spike counts back into class probabilities.
"""

__version__ = "0.1.0"
