import pytest

from partformer.config import load_config
from partformer.data import synth_generate

TINY = {
    "model.embed_dim": 12,
    "model.depth": 2,
    "model.num_heads": 3,
    "model.hdb_heads": 3,
    "model.img_height": 16,
    "model.img_width": 8,
    "model.patch": 4,
    "model.stride": 4,
    "synth.height": 16,
    "synth.width": 8,
    "synth.num_ids": 4,
    "synth.num_test_ids": 3,
    "synth.cams": 2,
    "synth.images_per_id_per_cam": 2,
    "synth.parts_per_identity": 2,
    "synth.styles_per_band": 3,
    "synth.person_width": 4,
    "sampler.P": 2,
    "sampler.K": 2,
    "optim.epochs": 2,
    "optim.base_lr": 0.01,
}


def tiny_config(root, **extra):
    return load_config(overrides={**TINY, "run.data_root": str(root), **extra})


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(tiny_config(root).synth, root)
    return root
