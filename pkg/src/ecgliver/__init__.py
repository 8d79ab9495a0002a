"""ECG-feature liver disease classifiers: boosted trees, bootstrap AUROC and TreeSHAP."""

__version__ = "0.1.0"
