"""Shape matching on edge maps.

Images and sketches are unified as edge-strength maps, passed through a
trainable edge-filtering layer and a fully-convolutional network with
global MAC pooling, and compared as l2-normalized descriptors. The package
covers the whole pipeline: siamese contrastive fine-tuning with hard
negative mining, multi-scale descriptor extraction, supervised whitening,
nearest-neighbor search with diffusion re-ranking, and transfer
classification for domain generalization.
"""

from .edgemap import (
    EdgeMap,
    binarize_random,
    detect_edges_fallback,
    load_edge_map,
    mirror,
    pad_zeros,
    preprocess_sketch,
    resize_max_side,
    scale_pyramid,
)
from .filterlayer import FilterParams, filter_backward, filter_forward
from .convnet import (
    ConvLayer,
    NetworkConfig,
    NetworkWeights,
    collapse_rgb_filters,
    default_config,
    init_weights,
    load_weights,
    save_weights,
)
from .training import (
    TrainConfig,
    TrainingData,
    TrainingItem,
    TrainingTuple,
    contrastive_loss,
    lr_schedule,
    mine_hard_negatives,
    pairs_from_tuple,
    sgd_step,
    train,
)
from .descriptors import (
    WhiteningTransform,
    aggregate_sum,
    apply_whitening,
    extract_edgemac,
    learn_whitening,
)
from .retrieval import (
    AffinityGraph,
    Index,
    build_knn_graph,
    combine_graphs,
    diffuse,
    diffusion_rerank,
    evaluate_acc_at_k,
    evaluate_map,
    knn_search,
    search_multi,
)
from .classify import LinearModel, evaluate_domain_generalization, predict, train_linear

__version__ = "0.1.0"
