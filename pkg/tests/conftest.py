import os

import pytest
import torch

torch.set_num_threads(int(os.environ.get("FOLEY_BRIDGE_THREADS", "1")))

from foley_bridge.backbone import BackboneConfig, init_backbone
from foley_bridge.bridge import init_bridge
from foley_bridge.curation import read_manifest
from foley_bridge.synthdata import gen_corpus


@pytest.fixture(scope="session")
def small_config():
    # d_model kept divisible by n_heads with an even head dim
    return BackboneConfig(n_blocks=2, d_model=16, n_heads=2, d_text=8, s_a_max=64)


@pytest.fixture(scope="session")
def small_backbone(small_config):
    return init_backbone(small_config, seed=1)


@pytest.fixture(scope="session")
def small_bridge(small_config):
    return init_bridge(small_config, d_video=6, seed=1)


@pytest.fixture(scope="session")
def default_config():
    return BackboneConfig()


@pytest.fixture(scope="session")
def default_models(default_config):
    backbone = init_backbone(default_config, seed=1)
    bridge = init_bridge(default_config, d_video=16, seed=1)
    return backbone, bridge


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 24-clip corpus on disk: (corpus_dir, records)."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    corpus_dir = str(root / "corpus")
    records = gen_corpus(24, 0, corpus_dir, duration=4.0)
    return corpus_dir, records


@pytest.fixture()
def tiny_records(tiny_corpus):
    corpus_dir, _ = tiny_corpus
    return read_manifest(os.path.join(corpus_dir, "manifest.jsonl"))
