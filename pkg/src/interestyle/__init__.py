"""Interest-region-focused encoder training for style-based generator inversion.

A desk-scale harness: a frozen toy style-based generator, an iterative
refinement encoder trained with interest-disentanglement and uninterest-
filter schemes, synthetic ground-truth-labeled scenes, masked evaluation
metrics and latent-space diagnostics.
"""

from .config import ConfigError, RunConfig
from .container import ContainerError, load_arrays, save_arrays
from .encoder import (EncoderConfig, RefinementEncoder, RefinementTrace,
                      build_encoder, encode_step, invert, rollout)
from .evaluation import (EditDirection, MetricsReport, apply_edit,
                         compute_direction, latent_variance, masked_metrics,
                         mix_report, variance_report)
from .generator import (Generator, GeneratorConfig, average_latent, broadcast,
                        build_generator, slot_range, style_mix)
from .losses import (LossWeights, ProxyFeatureNet, build_proxy, identity_loss,
                     identity_similarity, image_loss, ind_loss, l2_loss,
                     perceptual_loss, total_loss)
from .regions import (BlurSchedule, blur_radius, dilate_mask, gaussian_lpf,
                      uninterest_filter)
from .scenes import (SceneConfig, SceneDataset, SceneSample, make_dataset,
                     sample_scene)
from .training import (LoadedCheckpoint, TrainingError, TrainState,
                       batch_indices, ind_delta, load_checkpoint,
                       save_checkpoint, train, train_step)

__version__ = "0.1.0"
