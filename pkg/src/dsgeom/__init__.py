"""Transfer-predictive distances between labeled embedding datasets.

Label-aware centroid and sliced Wasserstein-2 distances, a directed
source-to-target variant, contrastive refinement of a metric head, alignment
statistics against a measured transfer matrix and the decision protocols
built on top (source selection, augmentation ranking, k-medoids subsets).
"""

__version__ = "0.1.0"

from .align import AlignmentResult, align_directed, align_symmetric, kendall_tau, pearson, spearman
from .cde import CdeConfig, train
from .core import DistanceMatrix, EmbeddingSet, TransferMatrix
from .directed import directed_distance_matrix, dsw
from .distance import SwConfig, distance_matrix, sliced_w2
from .encoder import EncoderSpec, MetricHead, ViewConfig, apply_head
from .errors import DataError, DsgeomError, NumericError
from .protocols import kmedoids_select, select_source
from .synth import SynthSpec, gen_library, gen_transfer_matrix
