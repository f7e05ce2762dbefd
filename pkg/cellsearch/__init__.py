"""cellsearch - cell-based neural architecture search at desk scale.

Searches a decoupled space of skip-connection patterns and generalized
operators with Hyperband-scheduled TPE that alternates between the two
sub-spaces, and filters proposals through a graph-convolutional accuracy
predictor. Synthetic and record-file oracles stand in for child-model
training so the searchers can be compared on regret and sample efficiency.
"""

__version__ = "0.1.0"
__author__ = "cellsearch contributors"
__license__ = "MIT"
__url__ = "https://github.com/cellsearch/cellsearch"

# Package metadata
__all__ = [
    "__version__",
    "__author__",
    "__license__",
    "__url__",
]
