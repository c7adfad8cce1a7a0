import json
from pathlib import Path

import pytest
import torch

from src.backends.toy import IdentityCodec, ToyBackend
from src.evaluation.synthetic import make_synthetic_faces
from src.images import save_image
from src.protector import ProtectionConfig
from src.recognition.registry import ModelRegistry, toy_registry_doc
from src.recognition.surrogates import FeatureCache
from src.verification.mock_server import MockVerificationServer

ENSEMBLE_IDS = ["toy-fr-0", "toy-fr-1", "toy-fr-2"]
EVALUATOR_ID = "toy-fr-3"


@pytest.fixture(scope="session")
def backend() -> ToyBackend:
    return ToyBackend()


@pytest.fixture(scope="session")
def codec() -> IdentityCodec:
    return IdentityCodec()


@pytest.fixture(scope="session")
def registry() -> ModelRegistry:
    return ModelRegistry(toy_registry_doc(4))


@pytest.fixture(scope="session")
def ensemble(registry):
    return registry.ensemble(ENSEMBLE_IDS)


@pytest.fixture(scope="session")
def evaluator(registry):
    return registry.get(EVALUATOR_ID)


@pytest.fixture(scope="session")
def faces():
    return make_synthetic_faces(n_sources=4, n_gallery_ids=8)


@pytest.fixture
def cache() -> FeatureCache:
    return FeatureCache()


@pytest.fixture
def toy_config() -> ProtectionConfig:
    return ProtectionConfig.for_toy(null_iters=10, adv_iters=5)


@pytest.fixture
def rng() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def manifest_factory(tmp_path, faces):
    """Write the synthetic faces as PNGs plus a manifest; returns the manifest path."""

    def make(n_entries: int = 3, name: str = "manifest.json", **extra) -> Path:
        data = tmp_path / "data"
        data.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(n_entries):
            group = faces.groups[i]
            train, test = faces.target_pair(i)
            save_image(faces.sources[i], data / "faces" / f"{i:03d}.png")
            save_image(train, data / "targets" / f"g{group + 1}_train.png")
            save_image(test, data / "targets" / f"g{group + 1}_test.png")
            entries.append(
                {
                    "id": f"face-{i:03d}",
                    "source": f"faces/{i:03d}.png",
                    "group": group + 1,
                    "target_train": f"targets/g{group + 1}_train.png",
                    "target_test": f"targets/g{group + 1}_test.png",
                }
            )
        path = data / name
        path.write_text(json.dumps({"entries": entries, **extra}), encoding="utf-8")
        return path

    return make


@pytest.fixture
def fast_run_config() -> dict:
    return {
        "protection": {"null_iters": 5, "adv_iters": 3, "lambda_adv": 1.0},
        "backend": {"id": "toy", "params": {}},
        "codec": {"id": "identity", "params": {}},
        "runtime": {"far": 0.1, "jobs": 1},
    }


@pytest.fixture
def mock_service():
    with MockVerificationServer(token="secret") as server:
        yield server
