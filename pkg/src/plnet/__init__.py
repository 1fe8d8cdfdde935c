"""Layerwise structured-SVM training for piecewise-linear convolutional nets."""

from .network import (ActivationPath, LabeledSample, NetworkState, accuracy,
                      forward, objective, predict, zero_one_loss)
from .layers import Affine, Conv, Dense, MaxPool, ReLU
from .dc import DCNetPair, DCValue, SplitWeights, build_dc_pair, dc_forward, verify_dc
from .latent import (GroundTruthAnchor, JointFeature, OracleResult, SearchSpace,
                     feature_vector, impute_latent, loss_augmented_oracle,
                     stream_value)
from .bcfw import DualState, block_step, init_dual, optimal_step, solve_layer_svm
from .cccp import TrainConfig, evaluate, layer_objective, optimize_layer, train_lwsvm
from .baselines import SgdConfig, backprop_subgradient, sgd_train
from .data import Dataset, load_idx, mnist_or_surrogate, normalize, split, synth_blobs, write_idx
from .config import build_network, load_config, load_dataset, load_weights, save_weights
from .logs import METRICS_HEADER, LogRecord, TrainLog
from .errors import (BadMagicError, ConfigError, ConstructionError,
                     CountMismatchError, DataError, NumericError, PlnetError,
                     TruncatedFileError)

__version__ = "0.1.0"
