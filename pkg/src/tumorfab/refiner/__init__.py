"""Stage 2: adversarial refinement of coarse volumes."""

from .inference import refine_volume
from .losses import LossWeights, hinge_reconstruction_loss, total_loss
from .networks import DualHeadDiscriminator, Generator
from .training import RefinerCheckpoint, TrainConfig, train_refiner
