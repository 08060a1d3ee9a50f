"""tractscl: streamline classification for diffusion-MRI tractography.

End-to-end toolkit for telling a target fiber pathway apart from nearby
streamlines: TRK/text tractogram I/O, geometric feature extraction,
class-balancing subsampling augmentation, supervised contrastive training
with an FA-compatibility constraint on positive pairs, a frozen-encoder
classifier stage, inference and evaluation.
"""

from ._kernels import USING_NUMBA
from .augment import AugmentConfig, balance_dataset, random_subsample
from .contrastive import (LossConfig, PairMask, build_pair_mask, supcon_loss,
                          supcon_loss_and_grad)
from .geometry import (FeatureSample, NormStats, apply_norm, arc_length,
                       batch_resample, filter_by_length, fit_norm_stats,
                       invert_norm, mean_fa, resample_uniform)
from .nn import (AdamState, ModelParams, adam_init, adam_step, classify,
                 encode, init_params, project, softmax_cross_entropy)
from .pipeline import (Metrics, Model, TrainConfig, evaluate, load_model,
                       predict, save_model, split_dataset, train)
from .synth import SynthConfig, generate
from .tract_io import (Streamline, Tractogram, read_text, read_trk,
                       write_text, write_trk)

__version__ = "0.1.0"
