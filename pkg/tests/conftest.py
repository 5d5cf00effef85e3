import numpy as np
import pytest

from deformnvs.dataset import Frame, load_dataset
from deformnvs.encoder import EncoderConfig
from deformnvs.nerformer import NerformerConfig
from deformnvs.synth import SceneSpec, SynthScene, write_dataset


SMALL_SPEC = SceneSpec(seed=5, n_frames=24, height=32, width=32)


@pytest.fixture(scope="session")
def small_scene():
    return SynthScene(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24-frame 32x32 dataset on disk, shared across tests."""
    root = tmp_path_factory.mktemp("data") / "scene"
    write_dataset(SMALL_SPEC, root, candidates=3)
    return load_dataset(root)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data2") / "scene"
    write_dataset(SMALL_SPEC, root, candidates=3)
    return root


def make_frame(scene: SynthScene, k: int) -> Frame:
    img, mask, cse, depth = scene.render_reference(k)
    return Frame(
        index=k,
        timestamp=float(scene.timestamps()[k]),
        image=img,
        mask=mask,
        camera=scene.camera(k),
        cse=cse,
        depth=depth,
    )


def tiny_configs():
    enc = EncoderConfig(d_z=16, widths=(8, 12, 16))
    net = NerformerConfig(d_model=32, n_rounds=1, d_ff=64)
    return enc, net
