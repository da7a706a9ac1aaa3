import pytest
import torch

from asffnet import data as D


@pytest.fixture(autouse=True)
def _single_thread():
    # deterministic reductions and no oversubscription on small CI boxes
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synthetic(tmp_path_factory):
    """20 per class, 64 px, multi_scale cues, split 4:1."""
    root = tmp_path_factory.mktemp("tiny_synth")
    manifest = D.synthesize_dataset(D.SyntheticSpec(n_per_class=20, image_size=64, seed=3), root)
    return root, manifest
