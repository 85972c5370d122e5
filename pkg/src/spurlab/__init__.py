"""spurlab: a desk-scale continual-learning lab for studying shortcut
features that are correlated with labels only in training data, or only
within a single task of the stream."""

__version__ = "0.1.0"

from . import features, metrics, nn, persist, scenario, training  # noqa: F401
