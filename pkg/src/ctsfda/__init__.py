"""Compositional source-free domain adaptation for time-series classification."""
from .adapt import ScalingFactors, adapt_group, compose_reconstruction, pretrain_backbone, pretrain_reconstructor
from .datamodel import ReshapeSpec, image_to_series, make_reshape_spec, series_to_image
from .ingest import DomainDataset, ShiftConfig, generate_synthetic_pair, load_dataset, save_dataset
from .losses import AdaptConfig, tsallis_ur_loss
from .tta import TTAConfig, ensemble_predict

__version__ = "0.1.0"
