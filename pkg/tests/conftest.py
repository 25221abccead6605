import os

import pytest

from stagekit.fabric import NetModel
from stagekit.sharedfs import CostModel, DirStore


def write_files(root, files: dict[str, bytes]) -> DirStore:
    for rel, data in files.items():
        p = os.path.join(root, *rel.split("/"))
        os.makedirs(os.path.dirname(p), exist_ok=True)
        with open(p, "wb") as fh:
            fh.write(data)
    return DirStore(root)


@pytest.fixture
def dir_store(tmp_path):
    return lambda files: write_files(tmp_path / "store", files)


@pytest.fixture
def toy_cost():
    # the hand-evaluated examples: 1 GB/s shared store, free metadata
    return CostModel(b_fs_bytes_per_s=1e9, r_meta_ops_per_s=1e30, l_meta_s=0.0, gamma=0.0)


@pytest.fixture
def toy_net():
    return NetModel(link_bandwidth=10e9, latency=0.0)
