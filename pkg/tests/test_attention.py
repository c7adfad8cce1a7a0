import json

import pytest
import torch
from PIL import Image

from src.backends.toy import TOY_SITE
from src.diffusion.inversion import ddim_invert, learn_null_embeddings
from src.diffusion.schedule import LatentState
from src.exceptions import ConfigError, KeyMismatchError, ShapeError
from src.guidance.attention import (
    AttentionMapSet,
    record_reference_maps,
    render_components,
    structure_loss,
    svd_components,
)
from src.protector import ProtectionConfig

SCHEDULE = ProtectionConfig.for_toy().schedule()


@pytest.fixture
def embeddings(backend, codec, faces):
    traj = ddim_invert(LatentState(codec.encode(faces.sources[0]), 0), 3, backend, SCHEDULE)
    return learn_null_embeddings(traj, 3, 1e-3, backend, SCHEDULE, progress=False)


def _map_set(*maps: torch.Tensor) -> AttentionMapSet:
    return AttentionMapSet({(t + 1, "site", 0): m for t, m in enumerate(maps)})


def test_reference_maps_cover_every_sampling_step(backend, embeddings) -> None:
    ref = record_reference_maps(embeddings, backend, SCHEDULE)
    assert ref.keys() == [(1, TOY_SITE, 0), (2, TOY_SITE, 0), (3, TOY_SITE, 0)]
    ref.check_stochastic()
    assert not any(m.requires_grad for m in ref.maps.values())

    z_bar = embeddings.bar_latent_at(2)
    direct = backend.capture_attention(z_bar.values, 2, embeddings.embedding_at(2))[(TOY_SITE, 0)]
    assert torch.equal(ref[(2, TOY_SITE, 0)], direct)


def test_site_filter_must_select_something(backend, embeddings) -> None:
    assert len(record_reference_maps(embeddings, backend, SCHEDULE, [TOY_SITE])) == 3
    with pytest.raises(ConfigError):
        record_reference_maps(embeddings, backend, SCHEDULE, ["unet.down.0"])


def test_structure_loss_of_identical_sets_is_exactly_zero(backend, embeddings) -> None:
    ref = record_reference_maps(embeddings, backend, SCHEDULE)
    assert structure_loss(ref, ref.detached()).item() == 0.0
    assert structure_loss(ref, ref.detached(), "sum").item() == 0.0


def test_reference_maps_survive_repeated_loss_evaluations(backend, embeddings, rng) -> None:
    ref = record_reference_maps(embeddings, backend, SCHEDULE)
    before = ref.digest()
    snapshot = {key: m.clone() for key, m in ref.maps.items()}

    for _ in range(3):
        adv = AttentionMapSet()
        for i in embeddings.timesteps:
            noise = torch.randn(backend.latent_shape, generator=rng, dtype=torch.float64)
            z = (embeddings.bar_latent_at(i).values + 0.1 * noise).requires_grad_(True)
            adv.add(i, backend.capture_attention(z, i, embeddings.embedding_at(i)))
        loss = structure_loss(adv, ref)
        assert loss.item() > 0.0
        loss.backward()

    assert ref.digest() == before
    for key, m in ref.maps.items():
        assert torch.equal(m, snapshot[key])
        assert not m.requires_grad and m.grad is None


def test_structure_loss_reductions() -> None:
    eye = torch.eye(2, dtype=torch.float64)
    flat = torch.full((2, 2), 0.5, dtype=torch.float64)
    adv, ref = _map_set(eye, eye), _map_set(flat, eye)
    assert structure_loss(adv, ref, "mean").item() == pytest.approx(0.125)
    assert structure_loss(adv, ref, "sum").item() == pytest.approx(1.0)


def test_structure_loss_key_checks() -> None:
    eye = torch.eye(2, dtype=torch.float64)
    with pytest.raises(KeyMismatchError):
        structure_loss(_map_set(eye), _map_set(eye, eye))
    with pytest.raises(KeyMismatchError):
        structure_loss(AttentionMapSet(), AttentionMapSet())
    with pytest.raises(ConfigError):
        structure_loss(_map_set(eye), _map_set(eye), "max")


def test_check_stochastic_flags_bad_rows() -> None:
    _map_set(torch.eye(3, dtype=torch.float64)).check_stochastic()
    with pytest.raises(ShapeError):
        _map_set(torch.full((2, 2), 0.3, dtype=torch.float64)).check_stochastic()
    with pytest.raises(ShapeError):
        _map_set(torch.ones(2, 3, dtype=torch.float64) / 3).check_stochastic()


def test_digest_tracks_map_contents() -> None:
    eye = torch.eye(2, dtype=torch.float64)
    flat = torch.full((2, 2), 0.5, dtype=torch.float64)
    assert _map_set(eye).digest() == _map_set(eye.clone()).digest()
    assert _map_set(eye).digest() != _map_set(flat).digest()


def test_svd_components_reconstruct_and_leave_the_next_singular_value(backend, rng) -> None:
    z = torch.randn(backend.latent_shape, generator=rng, dtype=torch.float64)
    attn = backend.capture_attention(z, 1, backend.null_embedding().values)[(TOY_SITE, 0)]
    n = attn.shape[0]

    full = svd_components(attn, n)
    torch.testing.assert_close(full.reconstruction(), attn)
    assert torch.all(full.singular_values[:-1] >= full.singular_values[1:])

    top2 = svd_components(attn, 2)
    residual = torch.linalg.matrix_norm(attn - top2.reconstruction(), ord=2)
    assert float(residual) == pytest.approx(float(top2.singular_values[2]), rel=1e-9)

    with pytest.raises(ConfigError):
        svd_components(attn, 0)
    with pytest.raises(ConfigError):
        svd_components(attn, n + 1)


def test_render_components_writes_pngs_and_sidecar(tmp_path, rng) -> None:
    logits = torch.randn(16, 16, generator=rng, dtype=torch.float64)
    attn = torch.softmax(logits, dim=-1)
    paths = render_components(attn, 3, (4, 4), tmp_path, prefix="site", size=32)

    assert [p.name for p in paths] == ["site_0.png", "site_1.png", "site_2.png", "site_singular_values.json"]
    with Image.open(paths[0]) as image:
        assert image.size == (32, 32)
        assert image.mode == "L"
    sidecar = json.loads(paths[-1].read_text())
    assert sidecar["k"] == 3
    assert len(sidecar["singular_values"]) == 16

    with pytest.raises(ShapeError):
        render_components(attn, 3, (3, 4), tmp_path)
