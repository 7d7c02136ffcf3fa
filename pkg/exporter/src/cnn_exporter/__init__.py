"""One-shot exporters from Keras into the spikecast container format."""

from .datasets import DatasetExportError, export_dataset, load_digits_splits
from .export import ExportError, export_golden_logits, export_model

__version__ = "0.1.0"
