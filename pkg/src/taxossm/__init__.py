"""Desk-scale taxonomic classification of DNA barcodes with a selective
state-space sequence model: data preprocessing, tokenizers, the model itself,
hierarchical training losses, evaluation and a command-line pipeline."""

from .records import BarcodeRecord, RANKS, TaxonomicLabel, make_label

__all__ = ["BarcodeRecord", "RANKS", "TaxonomicLabel", "make_label"]

__version__ = "0.1.0"
