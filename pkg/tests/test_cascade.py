import json

import numpy as np
import pytest

from autonet import cascade as cas
from autonet.cascade import (
    CascadeConfig,
    TrainingCase,
    cascade_converged,
    first_layer_channel_norms,
    inference_trajectory,
    load_cascade,
    mean_cross_entropy,
    run_inference_cascade,
    run_training_cascade,
)
from autonet.networks import (
    ModelParameters,
    Stage,
    TrainSchedule,
    TrainingDivergedError,
    UnetConfig,
    VoxelwiseConfig,
    build_voxelwise_spec,
    cross_entropy,
    instantiate,
    log_prior,
    softmax,
)
from autonet.volumes import PhantomSpec, PosteriorVolume, generate_phantom, normalize_intensity
from oracles import cross_entropy_loop

TINY_VOXELWISE = VoxelwiseConfig(
    sizes=(5, 9), conv_kernels=((3, 1, 1), (3, 3, 3)), conv_features=(4, 4, 4), fc_features=8, plane_features=4
)
TINY_SCHEDULE = TrainSchedule([Stage(1e-3, 300, 1), Stage(1e-4, 300, 1)], batch_size=64)


def tiny_cases(n=3):
    spec = PhantomSpec(
        dims=(24, 24, 24), brain_center=(11.5, 11.5, 11.5), brain_axes=(7, 6, 5),
        n_distractors=1, distractor_axes_range=(2, 3), noise_sigma=4.0,
    )
    out = []
    for i in range(n):
        v, m = generate_phantom(spec, 40 + i)
        out.append(TrainingCase(f"c{i}", v, m))
    return out


def tiny_config(**kw):
    base = dict(architecture="voxelwise", voxelwise=TINY_VOXELWISE, schedule=TINY_SCHEDULE,
                samples_per_image=600, epsilon=1e-9, max_steps=3, seed=1)
    base.update(kw)
    return CascadeConfig(**base)


@pytest.fixture(scope="module")
def cases():
    return tiny_cases()


@pytest.fixture(scope="module")
def trained(cases, tmp_path_factory):
    out = tmp_path_factory.mktemp("cascade")
    return run_training_cascade(cases, tiny_config(), out_dir=out), out


# convergence rule -----------------------------------------------------------


@pytest.mark.parametrize(
    "h,prev,eps,expected",
    [(0.5000, 0.4999, 0.001, True), (0.5, 0.3, 0.001, False), (0.42, 0.42, 1e-12, True), (0.42, 0.42, 5.0, True)],
)
def test_cascade_converged(h, prev, eps, expected):
    assert cascade_converged(h, prev, eps) is expected


def test_cascade_converged_rejects_bad_input():
    with pytest.raises(ValueError):
        cascade_converged(0.1, 0.2, 0.0)
    with pytest.raises(ValueError):
        cascade_converged(float("nan"), 0.2, 0.1)


@pytest.mark.parametrize("kw", [dict(epsilon=0), dict(max_steps=0), dict(architecture="3d"), dict(test_steps=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CascadeConfig(**kw)


def test_config_round_trip():
    cfg = tiny_config(architecture="unet", unet=UnetConfig(2, 4))
    back = CascadeConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


# costs ----------------------------------------------------------------------


def test_mean_cross_entropy_matches_loop(rng, cases):
    posts = [PosteriorVolume.from_brain(rng.uniform(0.01, 0.99, c.mask.dims)) for c in cases[:2]]
    masks = [c.mask for c in cases[:2]]
    total = sum(
        cross_entropy_loop(p.data.reshape(-1, 2).tolist(), m.data.reshape(-1).tolist()) for p, m in zip(posts, masks)
    )
    n = sum(m.data.size for m in masks)
    assert mean_cross_entropy(posts, masks) == pytest.approx(total / n, rel=1e-12)
    uniform = [PosteriorVolume.uniform(m.dims) for m in masks]
    assert mean_cross_entropy(uniform, masks) == pytest.approx(np.log(2), rel=1e-12)


def test_identity_embedding(rng, cases):
    """Eq.-(2) cost evaluated at logits log p reproduces the cost of p."""
    masks = [c.mask for c in cases]
    posts = [PosteriorVolume.from_brain(rng.uniform(0.001, 0.999, m.dims)) for m in masks]
    H_prev = mean_cross_entropy(posts, masks)
    total, n = 0.0, 0
    for p, m in zip(posts, masks):
        logits = log_prior(p.brain.reshape(-1))
        total += cross_entropy(softmax(logits), m.data.reshape(-1))
        n += m.data.size
    assert abs(total / n - H_prev) <= 1e-9


# training loop --------------------------------------------------------------


def test_single_step(cases):
    state = run_training_cascade(cases[:1], tiny_config(max_steps=1))
    assert len(state.models) == 1 and len(state.H) == 1 and state.I == []
    assert state.converged is False and state.stop_reason == "max_steps"
    assert state.H[0] < np.log(2)


def test_huge_epsilon_stops_at_first_comparison(cases):
    state = run_training_cascade(cases[:1], tiny_config(epsilon=1e9, max_steps=3))
    assert len(state.models) == 2
    assert state.converged and state.stop_reason == "epsilon"
    assert state.I == [pytest.approx(abs(state.H[1] - state.H[0]))]


def test_history_invariants(trained):
    state, _ = trained
    assert len(state.H) == len(state.models) == 3
    assert state.I == [pytest.approx(abs(b - a)) for a, b in zip(state.H, state.H[1:])]
    assert state.stop_reason == "max_steps" and not state.converged


def test_warm_start_monotone(trained):
    state, _ = trained
    for a, b in zip(state.H, state.H[1:]):
        assert b <= a + 1e-3


def test_warm_start_reproduces_previous_posterior(trained, cases):
    state, _ = trained
    spec = state.spec
    model = cas._warm_model(spec, state.models[0])
    work = normalize_intensity(cases[0].volume)
    first = cas.predict_step(state.models[0].to_model(), spec, work, PosteriorVolume.uniform(work.dims), state.config)
    again = cas.predict_step(model, spec, work, first, state.config)
    np.testing.assert_allclose(again.data, first.data, atol=1e-6)


def test_sentinel_posterior_flows_to_next_step(cases, monkeypatch):
    seen, produced = [], []
    real_ctx, real_predict = cas.assemble_context_channel, cas.predict_step

    def spy_ctx(p, mean):
        seen.append(np.array(p.brain))
        return real_ctx(p, mean)

    def spy_predict(*a, **kw):
        out = real_predict(*a, **kw)
        produced.append(np.array(out.brain))
        return out

    monkeypatch.setattr(cas, "assemble_context_channel", spy_ctx)
    monkeypatch.setattr(cas, "predict_step", spy_predict)
    two = cases[:2]
    sentinel = [PosteriorVolume.from_brain(np.full(c.mask.dims, 0.37)) for c in two]
    cfg = tiny_config(max_steps=2, warm_start=False)
    run_training_cascade(two, cfg, sentinel_posteriors=sentinel)
    # step 0 training builds its contexts from the sentinel
    for s in seen[:2]:
        assert np.all(s == 0.37)
    # step 1 training builds its contexts from exactly the step-0 outputs
    step0_outputs = produced[:2]
    step1_inputs = seen[2 + 2 : 2 + 2 + 2]  # skip the contexts built inside step-0 prediction
    for a, b in zip(step1_inputs, step0_outputs):
        np.testing.assert_array_equal(a, b)
    assert not np.all(step1_inputs[0] == 0.37)


def test_divergence_aborts_with_partial_state(cases, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise TrainingDivergedError("non-finite loss", [1.0])

    monkeypatch.setattr(cas.nets, "train", boom)
    with pytest.raises(TrainingDivergedError):
        run_training_cascade(cases[:1], tiny_config(), out_dir=tmp_path)
    hist = json.loads((tmp_path / "history.json").read_text())
    assert hist["stop_reason"] == "diverged" and hist["steps"] == 0


def test_mismatched_case_rejected(cases):
    small = PhantomSpec(dims=(20, 20, 20), brain_center=(9.5,) * 3, brain_axes=(5, 5, 5), n_distractors=0)
    bad = TrainingCase("bad", cases[0].volume, generate_phantom(small, 0)[1])
    with pytest.raises(ValueError, match="bad"):
        run_training_cascade([bad], tiny_config())
    with pytest.raises(ValueError):
        run_training_cascade([], tiny_config())


# inference ------------------------------------------------------------------


def test_inference_one_step_is_model_zero(trained, cases):
    state, _ = trained
    v = cases[1].volume
    p1 = run_inference_cascade(state, v, test_steps=1)
    work = normalize_intensity(v)
    direct = cas.predict_step(state.models[0].to_model(), state.spec, work, PosteriorVolume.uniform(v.dims), state.config)
    np.testing.assert_array_equal(p1.data, direct.data)


def test_inference_normalized_and_bounded(trained, cases):
    state, _ = trained
    traj = inference_trajectory(state, cases[2].volume, 3)
    assert len(traj) == 3
    for p in traj:
        np.testing.assert_allclose(p.data.sum(-1), 1, atol=1e-6)
        assert p.data.min() >= 0
    with pytest.raises(ValueError):
        run_inference_cascade(state, cases[0].volume, test_steps=4)
    np.testing.assert_array_equal(run_inference_cascade(state, cases[2].volume).data, traj[1].data)


# channel norms --------------------------------------------------------------


def test_channel_norms_examples():
    spec = build_voxelwise_spec(TINY_VOXELWISE, 2)
    params = ModelParameters.from_model(spec, instantiate(spec, 0))
    zero = ModelParameters(spec, {k: np.zeros_like(a) for k, a in params.arrays.items()})
    assert all(v == (0.0, 0.0) for v in first_layer_channel_norms(zero).values())
    arrays = dict(params.arrays)
    for k in arrays:
        if k.endswith("conv1.weight"):
            w = arrays[k].copy()
            w[:, 1] = 2 * w[:, 0]
            arrays[k] = w
    norms = first_layer_channel_norms(ModelParameters(spec, arrays))
    assert len(norms) == 6
    for n1, n2 in norms.values():
        assert n2 / n1 == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(ValueError):
        first_layer_channel_norms(ModelParameters.from_model(build_voxelwise_spec(TINY_VOXELWISE, 1), instantiate(build_voxelwise_spec(TINY_VOXELWISE, 1))))


def test_channel_norms_logged(trained):
    state, out = trained
    hist = json.loads((out / "history.json").read_text())
    assert len(hist["first_layer_channel_norms"]) == 3
    assert set(hist["first_layer_channel_norms"][0]) == set(first_layer_channel_norms(state.models[0]))


# persistence ----------------------------------------------------------------


def test_directory_layout(trained, cases):
    _, out = trained
    for t in range(3):
        assert (out / f"step-{t}" / "model.json").exists()
        assert (out / f"step-{t}" / "model.bin").exists()
        for c in cases:
            assert (out / f"step-{t}" / "posteriors" / f"{c.id}.nii.gz").exists()
    hist = json.loads((out / "history.json").read_text())
    assert set(hist) >= {"H", "I", "epsilon", "converged", "wall_times"}
    assert len(hist["H"]) == 3


def test_load_cascade_reproduces_inference(trained, cases):
    state, out = trained
    loaded = load_cascade(out)
    assert loaded.H == pytest.approx(state.H)
    a = run_inference_cascade(state, cases[0].volume, 2)
    b = run_inference_cascade(loaded, cases[0].volume, 2)
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_resume_continues_from_disk(cases, tmp_path, monkeypatch):
    first = run_training_cascade(cases[:2], tiny_config(max_steps=1), out_dir=tmp_path)
    calls = []
    real = cas._train_step

    def counting(t, *a, **kw):
        calls.append(t)
        return real(t, *a, **kw)

    monkeypatch.setattr(cas, "_train_step", counting)
    second = run_training_cascade(cases[:2], tiny_config(max_steps=2), out_dir=tmp_path)
    assert calls == [1]
    assert second.H[0] == pytest.approx(first.H[0])
    assert len(second.H) == 2
    with pytest.raises(ValueError, match="different cases"):
        run_training_cascade(cases[1:], tiny_config(max_steps=3), out_dir=tmp_path)


def test_unet_cascade_runs(cases):
    cfg = tiny_config(
        architecture="unet", unet=UnetConfig(2, 4), max_steps=2,
        schedule=TrainSchedule([Stage(1e-3, None, 2)], batch_size=8, decay_rate=0.9, decay_steps=2000),
    )
    state = run_training_cascade(cases[:2], cfg)
    assert len(state.H) == 2
    assert state.H[1] <= state.H[0] + 1e-3
    p = run_inference_cascade(state, cases[2].volume, 2)
    assert p.dims == cases[2].volume.dims
    np.testing.assert_allclose(p.data.sum(-1), 1, atol=1e-6)
