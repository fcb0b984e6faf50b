"""Two-stage synthetic brain-tumor MRI fabrication.

Stage 1 pastes an augmented tumor mask into a healthy scan, blurs the region
and applies a fitted per-class intensity change. Stage 2 refines the coarse
volume with a mask-conditioned 3D GAN.
"""

from .coarse import IntensityTransform, Stage1FitConfig, fabricate_coarse, fit_intensity_params
from .features import FeatureExtractor, class_perceptual_loss, extract_features, masked_class_pool
from .masks import MaskAugmentConfig, sample_synthetic_mask
from .metrics import dice, mean_dice, two_tailed_t_test
from .phantom import PhantomSpec, TumorSpec, generate_phantom_brain, generate_phantom_tumor_case
from .volume import BrainMask, MriVolume, SegMask, load_mask, load_volume, save_mask, save_volume

__version__ = "0.1.0"
