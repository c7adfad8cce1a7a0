import time

import pytest
import torch

from src.diffusion.inversion import (
    ddim_invert,
    denoise_step,
    embedding_lipschitz,
    learn_null_embeddings,
    reconstruct,
)
from src.diffusion.schedule import LatentState, ddim_coefficients
from src.exceptions import ConfigError, NonFiniteError
from src.protector import ProtectionConfig, Protector
from src.recognition.surrogates import FeatureCache

SCHEDULE = ProtectionConfig.for_toy().schedule()


def _clean_latent(codec, faces, index: int = 0) -> LatentState:
    return LatentState(codec.encode(faces.sources[index]), 0)


def test_invert_records_every_latent(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 5, backend, SCHEDULE)
    assert traj.t_start == 5
    assert [z.timestep for z in traj.latents] == [0, 1, 2, 3, 4, 5]
    assert not traj.latent_at(5).requires_grad

    null = backend.null_embedding().values
    manual = traj.latents[2]
    eps = backend.predict_noise(manual.values, 2, null)
    scale, coef = ddim_coefficients(2, 3, SCHEDULE)
    torch.testing.assert_close(traj.latent_at(3), scale * manual.values + coef * eps)


def test_invert_argument_checks(backend, codec, faces) -> None:
    z0 = _clean_latent(codec, faces)
    with pytest.raises(ConfigError):
        ddim_invert(z0, 0, backend, SCHEDULE)
    with pytest.raises(ConfigError):
        ddim_invert(z0, SCHEDULE.num_steps + 1, backend, SCHEDULE)
    with pytest.raises(ConfigError):
        ddim_invert(LatentState(z0.values, 2), 3, backend, SCHEDULE)


def test_invert_rejects_non_finite_latents(backend, codec, faces) -> None:
    z = codec.encode(faces.sources[0]).clone()
    z[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError) as info:
        ddim_invert(LatentState(z, 0), 3, backend, SCHEDULE)
    assert info.value.stage == "ddim_invert"


def test_learned_embeddings_match_least_squares_oracle(backend, codec, faces) -> None:
    started = time.perf_counter()
    traj = ddim_invert(_clean_latent(codec, faces), 3, backend, SCHEDULE)
    lr = 1.0 / max(embedding_lipschitz(backend, SCHEDULE, t) for t in (1, 2, 3))
    emb = learn_null_embeddings(
        traj, 400, lr, backend, SCHEDULE, optimizer="sgd", warm_start=False, early_stop=0.0, progress=False
    )

    for i in emb.timesteps:
        assert min(emb.loss_curves[i]) <= 1e-8
        z_bar = emb.bar_latent_at(i).values.flatten()
        a, b = backend.jacobians(i)
        scale, coef = ddim_coefficients(i, i - 1, SCHEDULE)
        residual = traj.latent_at(i - 1).flatten() - scale * z_bar - coef * (a @ z_bar + backend.offset(i))
        oracle = torch.linalg.pinv(coef * b) @ residual
        assert float((emb.embedding_at(i) - oracle).abs().max()) <= 1e-6
    assert time.perf_counter() - started < 10.0


def test_learning_closes_the_inversion_gap(backend, codec, faces) -> None:
    x = faces.sources[1]
    traj = ddim_invert(LatentState(codec.encode(x), 0), 3, backend, SCHEDULE)

    lr = 1.0 / max(embedding_lipschitz(backend, SCHEDULE, t) for t in (1, 2, 3))
    plain = learn_null_embeddings(traj, 0, lr, backend, SCHEDULE, progress=False)
    learned = learn_null_embeddings(traj, 50, lr, backend, SCHEDULE, optimizer="sgd", progress=False)

    plain_err = float((reconstruct(plain, codec) - x).abs().max())
    learned_err = float((reconstruct(learned, codec) - x).abs().max())
    assert learned_err < plain_err
    for i in learned.timesteps:
        assert learned.loss_curves[i][-1] <= learned.loss_curves[i][0]


def test_loss_never_rises_at_a_safe_step_size(backend, codec, faces) -> None:
    lr = 1.0 / max(embedding_lipschitz(backend, SCHEDULE, t) for t in (1, 2, 3))
    for index in range(len(faces.sources)):
        traj = ddim_invert(_clean_latent(codec, faces, index), 3, backend, SCHEDULE)
        emb = learn_null_embeddings(
            traj, 30, lr, backend, SCHEDULE, optimizer="sgd", keep_best=False, early_stop=0.0, progress=False
        )
        for curve in emb.loss_curves.values():
            assert len(curve) == 31
            assert all(b <= a * (1 + 1e-12) + 1e-18 for a, b in zip(curve, curve[1:]))


@pytest.mark.parametrize("warm_start", [True, False])
def test_without_iterations_the_step_size_is_irrelevant(backend, codec, faces, warm_start) -> None:
    traj = ddim_invert(_clean_latent(codec, faces, 2), 3, backend, SCHEDULE)
    slow, fast = (
        learn_null_embeddings(traj, 0, lr, backend, SCHEDULE, warm_start=warm_start, progress=False)
        for lr in (1e-4, 10.0)
    )
    for i in slow.timesteps:
        assert torch.equal(slow.embedding_at(i), fast.embedding_at(i))
    assert torch.equal(reconstruct(slow, codec), reconstruct(fast, codec))


def test_pipeline_without_embedding_iterations_ignores_the_step_size(backend, codec, ensemble, faces) -> None:
    x, target = faces.sources[2], faces.target_train[2]
    results = []
    for lr in (1e-4, 10.0):
        cfg = ProtectionConfig.for_toy(null_iters=0, null_lr=lr, adv_iters=3, lambda_adv=1.0)
        results.append(Protector(backend, codec, ensemble, cfg, FeatureCache(), progress=False).protect(x, target))
    assert torch.equal(results[0].protected_image, results[1].protected_image)
    assert results[0].loss_curves == results[1].loss_curves


def test_zero_iterations_keep_the_null_embedding(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 3, backend, SCHEDULE)
    emb = learn_null_embeddings(traj, 0, 0.1, backend, SCHEDULE, progress=False)
    null = backend.null_embedding().values
    assert emb.timesteps == [3, 2, 1]
    for i in emb.timesteps:
        assert torch.equal(emb.embedding_at(i), null)
        assert len(emb.loss_curves[i]) == 1


def test_bar_path_is_the_sampling_chain(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 3, backend, SCHEDULE)
    emb = learn_null_embeddings(traj, 5, 0.1, backend, SCHEDULE, progress=False)
    z = emb.bar_latent_at(3)
    assert torch.equal(z.values, traj.latent_at(3))
    for i in (3, 2, 1):
        z = denoise_step(backend, SCHEDULE, z, emb.embedding_at(i))
        assert torch.equal(z.values, emb.bar_latent_at(i - 1).values)
    assert emb.final_latent.timestep == 0


def test_early_stop_ends_the_inner_loop(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 2, backend, SCHEDULE)
    emb = learn_null_embeddings(traj, 30, 0.1, backend, SCHEDULE, early_stop=1e6, progress=False)
    assert all(len(curve) == 1 for curve in emb.loss_curves.values())


def test_partial_start_learns_only_lower_timesteps(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 6, backend, SCHEDULE)
    emb = learn_null_embeddings(traj, 2, 0.1, backend, SCHEDULE, start=3, progress=False)
    assert sorted(emb.embeddings) == [1, 2, 3]
    assert torch.equal(emb.bar_latent_at(3).values, traj.latent_at(3))


def test_learning_argument_checks(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 3, backend, SCHEDULE)
    with pytest.raises(ConfigError):
        learn_null_embeddings(traj, 5, 0.1, backend, SCHEDULE, start=4)
    with pytest.raises(ConfigError):
        learn_null_embeddings(traj, -1, 0.1, backend, SCHEDULE)
    with pytest.raises(ConfigError):
        learn_null_embeddings(traj, 5, 0.1, backend, SCHEDULE, optimizer="lbfgs", progress=False)


def test_diverging_learning_raises(backend, codec, faces) -> None:
    traj = ddim_invert(_clean_latent(codec, faces), 3, backend, SCHEDULE)
    with pytest.raises(NonFiniteError) as info:
        learn_null_embeddings(traj, 5000, 1e12, backend, SCHEDULE, optimizer="sgd", early_stop=0.0, progress=False)
    assert info.value.stage == "null-text"
