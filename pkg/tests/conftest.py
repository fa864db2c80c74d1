import pytest

from pslnet import degrade
from pslnet.model import ModelConfig


@pytest.fixture(scope="session")
def micro_config():
    """Smallest model that still exercises every architectural element."""
    return ModelConfig(base_channels=4, depth=4, interaction_hidden=8)


@pytest.fixture(scope="session")
def assets():
    """A handful of procedural clean images and watermarks."""
    images, marks = degrade.generate_test_assets(4, 3, seed=42, image_size=64,
                                                 wm_size=24)
    return images, marks


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """Small on-disk corpus: 8 images, 32x32 patches, sigma 15, alpha 0.3."""
    root = tmp_path_factory.mktemp("corpus")
    images, marks = degrade.generate_test_assets(8, 3, seed=7, image_size=64,
                                                 wm_size=24)
    clean_dir = root / "clean"
    wm_dir = root / "wm"
    clean_dir.mkdir()
    wm_dir.mkdir()
    for i, img in enumerate(images):
        degrade.save_image(clean_dir / f"img{i:02d}.png", img)
    for wm in marks:
        degrade.save_watermark(wm_dir / f"{wm.wm_id}.png", wm)
    config = degrade.CorpusConfig(patch_size=32, stride=32, sigma_set=(15.0,),
                                  transparencies=(0.3,), seed=5)
    manifest = degrade.build_corpus(clean_dir, wm_dir, config, root / "out")
    return manifest
