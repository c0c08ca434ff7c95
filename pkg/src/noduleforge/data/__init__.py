from .augment import AugmentRecord, apply_to_voxels, augment
from .patches import Patch, crop, extract_patches, random_crop, tile_origins, volume_boxes
from .splits import SplitPlan, holdout_split, kfold_split
from .synth import GenerationError, SynthConfig, synth_generate, synth_volume
from .volume import (Annotation, Volume, VolumeFormatError, VolumeHeader, normalize,
                     read_annotations, read_volume, rescale_to_hu, write_annotations, write_volume)
