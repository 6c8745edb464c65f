"""treelab: gated binary-tree sequence models, a matched Transformer
baseline, and the training/benchmark harness around them, on a
from-scratch reverse-mode autodiff core."""

__version__ = "0.1.0"
