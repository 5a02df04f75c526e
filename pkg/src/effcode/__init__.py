"""Structure learning for feed-forward networks from the statistics of their inputs.

Submodules: ``dataio`` (loading, whitening, synthetic blocks), ``infotheory``
(k-NN entropy, multi-information), ``sparsecode`` (FISTA, dictionary
learning), ``structlearn`` (layer-wise structure and depth), ``netprime``
(masked networks primed by a structure), ``experiments`` and ``cli``.
"""
from .dataio import ZCAWhitener
from .infotheory import CdfTransformer, knn_entropy, multi_information
from .netprime import PrimedNetworkClassifier
from .sparsecode import DictionaryLearner
from .structlearn import StructureLearner

__all__ = [
    "CdfTransformer", "DictionaryLearner", "PrimedNetworkClassifier", "StructureLearner",
    "ZCAWhitener", "knn_entropy", "multi_information",
]
__version__ = "0.1.0"
