"""Two-stream gaze classification: fixation maps, frozen backbones, a trainable
fusion head, cross-validated evaluation and attribution analyses."""

__version__ = "0.1.0"

TD, ASD = 0, 1
CLASS_NAMES = ("TD", "ASD")
N_VARIANTS = 10
