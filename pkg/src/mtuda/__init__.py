"""Mean-teacher unsupervised domain adaptation for 2D lesion segmentation."""

__version__ = "0.1.0"

from .data import (AugmentationPolicy, DatasetFormatError, FirewalledImage, GeneratorConfig, LabeledImage,
                   TargetLabelAccess, augment, firewall, gen_synthetic_domains, hu_window, load_dataset,
                   save_dataset)
from .style import fft_compose, fft_decompose, fft_style_transfer, histogram_match, stylize
from .segnet import NetworkConfig, SegNet, StageSpec
from .mean_teacher import EmaSchedule, consistency_loss, dice_loss, ema_update, make_pseudo_labels, pixel_entropy
from .prototypes import PrototypeBank, batch_prototypes, momentum_update, prototype_loss
from .contrastive import NegativeQueue, global_contrastive_loss, glcl_loss, local_contrastive_loss
from .aalp import cosine_reg, fuse_attention, global_local_fuse, select_patch
from .trainer import (EvalReport, LossDivergence, TrainConfig, dice_score, evaluate, iou, load_checkpoint,
                      save_checkpoint, selection_score, total_loss, train)
