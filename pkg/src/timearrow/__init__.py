"""Self-supervised time arrow prediction for time-lapse microscopy."""

__version__ = "0.1.0"

from .estimators import DenseProbeSegmenter, TimeArrowPretrainer, TimeArrowProbeClassifier
from .losses import LossConfig, decorrelation_loss, total_loss
from .models import ExtractorConfig, HeadConfig, TimeArrowNet, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .video_io import VideoSequence, load_video, save_video

__all__ = [
    "DenseProbeSegmenter", "TimeArrowPretrainer", "TimeArrowProbeClassifier", "LossConfig",
    "decorrelation_loss", "total_loss", "ExtractorConfig", "HeadConfig", "TimeArrowNet", "load_checkpoint",
    "save_checkpoint", "SynthConfig", "generate", "VideoSequence", "load_video", "save_video",
]
