import numpy as np
import pytest
import torch

from src.exceptions import ConfigError, NonFiniteError
from src.protector import (
    ProtectionConfig,
    Protector,
    multi_timestep_optimize,
    protect,
    protect_obfuscate,
)
from src.recognition.surrogates import FeatureCache, adversarial_loss, cosine_similarity


def _protector(backend, codec, ensemble, **overrides) -> Protector:
    params = {"null_iters": 10, "adv_iters": 10, **overrides}
    return Protector(backend, codec, ensemble, ProtectionConfig.for_toy(**params), FeatureCache(), progress=False)


def test_zero_iterations_return_the_reconstruction_bit_exactly(backend, codec, ensemble, faces) -> None:
    result = _protector(backend, codec, ensemble, adv_iters=0).protect(faces.sources[0], faces.target_train[0])
    assert torch.equal(result.protected_image, result.reconstruction)
    assert result.loss_curves["str"] == [0.0]
    assert result.selected_iteration == 0
    assert len(result.loss_curves["total"]) == 1


def test_zero_weight_leaves_the_latent_untouched(backend, codec, ensemble, faces) -> None:
    result = _protector(backend, codec, ensemble, lambda_adv=0.0).protect(faces.sources[0], faces.target_train[0])
    assert torch.equal(result.protected_image, result.reconstruction)
    assert all(v == 0.0 for v in result.loss_curves["str"])
    assert result.loss_curves["adv"][0] == result.loss_curves["adv"][-1]


def test_structure_loss_starts_at_zero_and_is_tracked(backend, codec, ensemble, faces) -> None:
    result = _protector(backend, codec, ensemble, lambda_adv=1.0).protect(faces.sources[0], faces.target_train[0])
    curves = result.loss_curves
    assert curves["str"][0] == 0.0
    assert max(curves["str"]) > 0.0
    assert len(curves["total"]) == len(curves["adv"]) == len(curves["str"]) == 11
    assert result.config["lambda_adv"] == 1.0


def test_protection_moves_features_toward_the_target(backend, codec, ensemble, faces) -> None:
    x, target = faces.sources[0], faces.target_train[0]
    protector = _protector(backend, codec, ensemble, lambda_adv=1.0, adv_iters=40, adv_lr=0.02)
    result = protector.protect(x, target)

    with torch.no_grad():
        assert adversarial_loss(result.protected_image, target, ensemble) < adversarial_loss(x, target, ensemble)
        for model in ensemble:
            after = cosine_similarity(model.extract(result.protected_image), model.extract(target))
            before = cosine_similarity(model.extract(x), model.extract(target))
            assert after > before

    # brute-force grid over the plane spanned by the update and a random direction
    ctx = protector.prepare(x)
    start = ctx.start_latent
    step = result.final_latent.values - start
    other = torch.randn(step.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    other = other - (other * step).sum() / (step * step).sum() * step
    other = other * (step.norm() / other.norm())

    def adv_at(alpha: float, beta: float) -> float:
        with torch.no_grad():
            return protector.objective(ctx, target, start + alpha * step + beta * other).adv.item()

    grid = {(a, b): adv_at(a, b) for a in (0.0, 0.5, 1.0) for b in (-0.5, 0.0, 0.5)}
    best_without_update = min(v for (a, _), v in grid.items() if a == 0.0)
    assert grid[(1.0, 0.0)] < best_without_update
    assert grid[(0.5, 0.0)] < grid[(0.0, 0.0)]


def test_structure_switch_only_changes_the_total(backend, codec, ensemble, faces) -> None:
    result = _protector(backend, codec, ensemble, lambda_adv=0.5, use_structure_loss=False).protect(
        faces.sources[1], faces.target_train[1]
    )
    curves = result.loss_curves
    for total, adv in zip(curves["total"], curves["adv"]):
        assert total == pytest.approx(0.5 * adv, rel=1e-12)
    assert max(curves["str"]) > 0.0


def test_runs_are_deterministic(backend, codec, ensemble, faces) -> None:
    one = _protector(backend, codec, ensemble, lambda_adv=1.0).protect(faces.sources[2], faces.target_train[2])
    two = _protector(backend, codec, ensemble, lambda_adv=1.0).protect(faces.sources[2], faces.target_train[2])
    assert one.loss_curves == two.loss_curves
    assert torch.equal(one.protected_image, two.protected_image)
    assert one.reference_digest == two.reference_digest


def test_keep_best_returns_the_lowest_loss_iterate(backend, codec, ensemble, faces) -> None:
    protector = _protector(backend, codec, ensemble, lambda_adv=1.0, adv_lr=0.2, keep_best=True)
    result = protector.protect(faces.sources[0], faces.target_train[0])
    assert result.selected_iteration == int(np.argmin(result.loss_curves["total"]))

    ctx = protector.prepare(faces.sources[0])
    with torch.no_grad():
        image, _, _ = protector.sample_path(ctx, result.final_latent.values, capture=False)
    torch.testing.assert_close(image, result.protected_image)


def test_sgd_optimizer_is_selectable(backend, codec, ensemble, faces) -> None:
    result = _protector(backend, codec, ensemble, lambda_adv=1.0, optimizer="sgd", adv_lr=0.5).protect(
        faces.sources[0], faces.target_train[0]
    )
    assert result.loss_curves["adv"][-1] < result.loss_curves["adv"][0]


def test_obfuscation_with_zero_weight_matches_impersonation(backend, codec, ensemble, faces) -> None:
    x, synth = faces.sources[0], faces.target_train[3]
    plain = _protector(backend, codec, ensemble, lambda_adv=1.0).protect(x, synth)
    obf = _protector(backend, codec, ensemble, lambda_adv=1.0, mode="obfuscate_impersonate", w_obf=0.0).protect(
        x, synth
    )
    torch.testing.assert_close(obf.protected_image, plain.protected_image)
    np.testing.assert_allclose(obf.loss_curves["impersonation"], plain.loss_curves["adv"], rtol=1e-9)


def test_obfuscation_pushes_away_from_the_source(backend, codec, ensemble, faces) -> None:
    x, synth = faces.sources[0], faces.target_train[3]
    cfg = ProtectionConfig.for_toy(
        null_iters=10, adv_iters=30, lambda_adv=1.0, adv_lr=0.02, mode="obfuscate_impersonate", w_obf=1.0
    )
    result = protect_obfuscate(x, synth, cfg, backend, codec, ensemble, FeatureCache())
    curves = result.loss_curves
    assert curves["obfuscation"][-1] > curves["obfuscation"][0]
    for adv, imp, obf in zip(curves["adv"], curves["impersonation"], curves["obfuscation"]):
        assert adv == pytest.approx(imp - obf, abs=1e-12)


def test_multi_timestep_with_only_the_start_step_matches_protect(backend, codec, ensemble, faces) -> None:
    x, target = faces.sources[1], faces.target_train[1]
    base = ProtectionConfig.for_toy(null_iters=10, adv_iters=8, lambda_adv=1.0)
    single = protect(x, target, base, backend, codec, ensemble, FeatureCache())
    multi = multi_timestep_optimize(
        x, target, base.replace(multi_timestep=True, multi_timesteps=[3]), backend, codec, ensemble, FeatureCache()
    )
    assert torch.equal(single.protected_image, multi.protected_image)
    assert single.loss_curves == multi.loss_curves
    assert multi.residuals == {}


def test_multi_timestep_optimizes_a_residual_per_step(backend, codec, ensemble, faces) -> None:
    cfg = ProtectionConfig.for_toy(null_iters=10, adv_iters=10, lambda_adv=1.0, multi_timestep=True)
    result = multi_timestep_optimize(faces.sources[1], faces.target_train[1], cfg, backend, codec, ensemble)
    assert sorted(result.residuals) == [1, 2]
    assert sorted(result.grad_norms) == [1, 2, 3]
    assert all(len(norms) == 10 for norms in result.grad_norms.values())
    assert any(float(r.abs().max()) > 0 for r in result.residuals.values())
    assert result.loss_curves["adv"][-1] < result.loss_curves["adv"][0]


def test_more_optimized_timesteps_reach_a_lower_adversarial_loss(backend, codec, ensemble, faces) -> None:
    single = ProtectionConfig.for_toy(null_iters=10, adv_iters=10, lambda_adv=1.0)
    multi = single.replace(multi_timestep=True)
    for i in range(len(faces.sources)):
        x, target = faces.sources[i], faces.target_pair(i)[0]
        one = protect(x, target, single, backend, codec, ensemble, FeatureCache())
        many = multi_timestep_optimize(x, target, multi, backend, codec, ensemble, FeatureCache())
        assert len(many.loss_curves["adv"]) == len(one.loss_curves["adv"])
        assert many.loss_curves["adv"][-1] <= one.loss_curves["adv"][-1] + 1e-12


def test_wall_clock_grows_with_the_optimized_timesteps(backend, codec, ensemble, faces) -> None:
    base = ProtectionConfig.for_toy(null_iters=5, adv_iters=30, lambda_adv=1.0, multi_timestep=True)
    x, target = faces.sources[0], faces.target_train[0]

    def fastest(steps: list[int]) -> float:
        cfg = base.replace(multi_timesteps=steps)
        protector = Protector(backend, codec, ensemble, cfg, FeatureCache(), progress=False)
        ctx = protector.prepare(x)
        return min(protector.optimize(ctx, target, steps).wall_clock_s for _ in range(5))

    assert fastest([3]) < fastest([3, 2, 1])


def test_multi_timestep_entry_point_needs_the_flag(backend, codec, ensemble, faces) -> None:
    with pytest.raises(ConfigError):
        multi_timestep_optimize(
            faces.sources[0], faces.target_train[0], ProtectionConfig.for_toy(), backend, codec, ensemble
        )


def test_without_learned_embeddings_the_null_embedding_is_used(backend, codec, ensemble, faces) -> None:
    protector = _protector(backend, codec, ensemble, use_null_embeddings=False)
    ctx = protector.prepare(faces.sources[0])
    null = backend.null_embedding().values
    assert all(torch.equal(ctx.embeddings.embedding_at(i), null) for i in ctx.embeddings.timesteps)


def test_full_inversion_keeps_the_start_latent(backend, codec, ensemble, faces) -> None:
    shallow = _protector(backend, codec, ensemble).prepare(faces.sources[0])
    deep = _protector(backend, codec, ensemble, full_inversion=True).prepare(faces.sources[0])
    assert deep.trajectory.t_start == 20
    assert torch.equal(deep.start_latent, shallow.start_latent)
    assert deep.embeddings.timesteps == [3, 2, 1]


def test_non_finite_loss_aborts_with_the_iteration(backend, codec, ensemble, faces, monkeypatch) -> None:
    def broken(*args, **kwargs):
        return torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)

    monkeypatch.setattr("src.protector.adversarial_loss", broken)
    with pytest.raises(NonFiniteError) as info:
        _protector(backend, codec, ensemble).protect(faces.sources[0], faces.target_train[0])
    assert info.value.stage == "protect"
    assert info.value.step == 0


@pytest.mark.parametrize(
    "overrides",
    [
        {"t_start": 0},
        {"t_start": 21},
        {"lambda_adv": -0.1},
        {"adv_iters": -1},
        {"mode": "dodge"},
        {"optimizer": "rmsprop"},
        {"schedule_family": "cosine"},
        {"structure_reduction": "max"},
        {"multi_timesteps": [4]},
        {"multi_timesteps": []},
    ],
)
def test_config_validation(overrides) -> None:
    with pytest.raises(ConfigError):
        ProtectionConfig.for_toy(**overrides)


def test_config_documents() -> None:
    cfg = ProtectionConfig()
    assert (cfg.T, cfg.t_start, cfg.null_iters, cfg.adv_iters) == (20, 3, 20, 35)
    assert (cfg.null_lr, cfg.adv_lr, cfg.lambda_adv) == (0.1, 0.01, 0.003)
    assert ProtectionConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == ProtectionConfig().digest()
    assert cfg.digest() != cfg.replace(seed=1).digest()
    with pytest.raises(ConfigError):
        ProtectionConfig.from_dict({"lambda": 0.1})


def test_optimized_timesteps() -> None:
    assert ProtectionConfig.for_toy().optimized_timesteps() == [3]
    assert ProtectionConfig.for_toy(multi_timestep=True).optimized_timesteps() == [3, 2, 1]
    assert ProtectionConfig.for_toy(multi_timestep=True, multi_timesteps=[1, 3, 1]).optimized_timesteps() == [3, 1]


def test_production_schedule_is_subsampled() -> None:
    sched = ProtectionConfig().schedule()
    assert sched.num_steps == 20
    assert sched.model_timestep(3) == 150
