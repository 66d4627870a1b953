"""Non-autoregressive sequence recognition via valley-segmented frame pooling."""

from . import cli, ctc, model, numcore, synthdata, traineval, uma

__all__ = ["cli", "ctc", "model", "numcore", "synthdata", "traineval", "uma"]
__version__ = "0.1.0"
