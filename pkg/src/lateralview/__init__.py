"""Single- and multi-view chest X-ray classifiers with missing-view evaluation."""

__version__ = "0.1.0"
