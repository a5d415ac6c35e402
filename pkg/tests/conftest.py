import numpy as np
import pytest
import torch

from myoda.cli import _preprocess_manifest
from myoda.core import load_manifest
from myoda.nets import NetConfig
from myoda.phantom import PhantomParams, generate_dataset
from myoda.preprocess import DEFAULT_DILATION_SCHEDULE, NormalizationSpec


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(2)


@pytest.fixture()
def tiny_net_cfg():
    return NetConfig(base_channels=2, depth=2, norm_kind="instance", patch_disc_layers=2, res_blocks=1, seed=0)


@pytest.fixture(scope="session")
def small_phantom_dir(tmp_path_factory):
    """A small on-disk phantom dataset shared across tests."""
    out = tmp_path_factory.mktemp("phantoms")
    params = PhantomParams(image_size=64, n_samples=10, noise_sigma=10.0, seed=21)
    generate_dataset(params, out)
    return out


@pytest.fixture(scope="session")
def processed_phantoms(small_phantom_dir, tmp_path_factory):
    """Normalized MR (dilated labels) and CT manifests ready for training."""
    out = tmp_path_factory.mktemp("processed")
    spec = NormalizationSpec()
    mr = _preprocess_manifest(
        load_manifest(small_phantom_dir / "manifest_mr.csv"), out / "mr", spec, DEFAULT_DILATION_SCHEDULE
    )
    ct = _preprocess_manifest(load_manifest(small_phantom_dir / "manifest_ct.csv"), out / "ct", spec, ())
    return {"mr": mr, "ct": ct, "dir": out}


def rand_mask(rng: np.random.Generator, shape=(8, 8), p=0.4) -> np.ndarray:
    return rng.random(shape) < p
