"""Streamline tractography registration with probabilistic keypoints and thin-plate splines."""
__version__ = "0.1.0"

from .errors import (DegenerateStreamlineError, FormatError, NumericalError, TractRegError,
                     ValidationError)
from .fileio import load_keypoints_csv, load_tractogram, save_keypoints_csv, save_tractogram
from .metrics import (abd, bundle_report, chamfer_loss, l21_distance, mdf_distance,
                      tract_density_map, wdice)
from .network import ModelParams, detect_keypoints, init_params, nn_baseline_keypoints
from .pipeline import load_transform, register, save_transform
from .streamlines import (StreamlineGraph, Tractogram, build_graph, resample_streamline,
                          resample_tractogram, sample_patch)
from .synth import BundleSpec, gen_bundle, gen_phantom, make_pair
from .tps import TpsTransform, apply_transform, kernel_u, sample_lambda, solve_tps
from .train import TrainConfig, checkpoint_load, checkpoint_save, fit, lr_schedule
