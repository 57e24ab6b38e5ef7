"""Point -> shape -> appearance video generation on a synthetic desk-scale world."""

from .backbone import LatentCodec, ModelConfig, MotionForcingDiT
from .camera_warp import CameraPose, project, unproject, warp_depth
from .control import PointTrackSet, rasterize_points
from .forcing import NoiseSchedule, train
from .masking import MaskSpec, sample_mask_spec
from .sampler import Sampler, load_pipeline, sample
from .worldgen import SceneSpec, generate_scene, random_scene_spec

__version__ = "0.1.0"
