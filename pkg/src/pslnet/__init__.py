"""Self-supervised noisy-image watermark removal pipeline."""

__version__ = "0.1.0"

from .degrade import (CorpusConfig, CorpusManifest, DegradationParams,
                      TrainingSample, WatermarkAsset, add_gaussian_noise,
                      blend_watermark, build_corpus, extract_patches,
                      generate_test_assets, make_pair)
from .loss import LossBreakdown, mixed_loss, loss_gradient
from .metrics import MetricReport, evaluate_corpus, psnr, rmse, ssim
from .model import (ModelConfig, ModelSummary, PSLNet, PslnetOutput,
                    load_checkpoint, save_checkpoint, summarize)
from .perception import PerceptionNet, extract_features, make_perception
from .train import Adam, TrainConfig, fit, lr_at, preset_config, train_step

__all__ = [
    "__version__",
    "CorpusConfig", "CorpusManifest", "DegradationParams", "TrainingSample",
    "WatermarkAsset", "add_gaussian_noise", "blend_watermark", "build_corpus",
    "extract_patches", "generate_test_assets", "make_pair",
    "LossBreakdown", "mixed_loss", "loss_gradient",
    "MetricReport", "evaluate_corpus", "psnr", "rmse", "ssim",
    "ModelConfig", "ModelSummary", "PSLNet", "PslnetOutput",
    "load_checkpoint", "save_checkpoint", "summarize",
    "PerceptionNet", "extract_features", "make_perception",
    "Adam", "TrainConfig", "fit", "lr_at", "preset_config", "train_step",
]
