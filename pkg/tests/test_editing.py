import numpy as np
import pytest

from nmglab.data_io import NearestCentroid, to_image
from nmglab.denoiser import AnalyticModel, Condition, MLPDenoiser
from nmglab.editing import EditSpec, edit
from nmglab.inversion import GuidanceConfig, reconstruct
from nmglab.lab import ModelRecipe, heldout_images
from nmglab.sampler import run_inversion


@pytest.fixture(scope="module")
def small():
    m = MLPDenoiser.init(3, shape=(4, 4), hidden=32, emb_dim=8, time_dim=8)
    r = np.random.default_rng(8)
    m.params["W3"] = r.standard_normal(m.params["W3"].shape) * 0.2
    return m


@pytest.fixture(scope="module")
def small_traj(sched, small):
    z0 = np.random.default_rng(2).uniform(-1, 1, (4, 4))
    return run_inversion(small, sched, z0, Condition.of_class(0))


def test_inject_until_bounds(sched, small, small_traj):
    src, tgt = Condition.of_class(0), Condition.of_class(1)
    for bad in (-1, 51):
        with pytest.raises(ValueError):
            edit(small, sched, small_traj, EditSpec(src, tgt, bad))
    assert EditSpec(src, tgt).tau(50) == 25


@pytest.mark.parametrize("method", ["nmg", "ddim_cfg", "nti", "npi", "nti_plus_nmg"])
def test_full_injection_same_condition_reproduces_reconstruction(sched, small, small_traj, method):
    c = Condition.of_class(0)
    r = edit(small, sched, small_traj, EditSpec(c, c, 50), method)
    assert np.array_equal(r.edited_z0, r.recon_z0)
    assert np.array_equal(r.edited.latents, r.reconstruction.trajectory.latents)


def test_no_coupling_is_method_independent(sched, small, small_traj):
    spec = EditSpec(Condition.of_class(0), Condition.of_class(2), 0)
    cfg = GuidanceConfig.editing()
    outs = [edit(small, sched, small_traj, spec, m, cfg, edit_scale=1.0).edited_z0
            for m in ("nmg", "ddim_cfg", "npi")]
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_edit_does_not_disturb_reconstruction(sched, small, small_traj):
    cfg = GuidanceConfig.editing()
    alone = reconstruct(small, sched, small_traj, Condition.of_class(0), "nmg", cfg)
    before = small_traj.latents.copy()
    r = edit(small, sched, small_traj, EditSpec(Condition.of_class(0), Condition.of_class(1)), "nmg", cfg)
    assert np.array_equal(alone.trajectory.latents, r.reconstruction.trajectory.latents)
    assert np.array_equal(small_traj.latents, before)


def test_injected_rungs_match_reconstruction(sched, small, small_traj):
    r = edit(small, sched, small_traj, EditSpec(Condition.of_class(0), Condition.of_class(1), 10))
    rec = r.reconstruction.trajectory
    assert np.array_equal(r.edited.latents[40:], rec.latents[40:])
    assert not np.array_equal(r.edited.latents[:40], rec.latents[:40])
    assert r.edit_deviation.shape == (51, 2)


def test_analytic_model_edit_runs(sched):
    r = np.random.default_rng(1)
    m = AnalyticModel(sched, [0.5, 0.5], r.standard_normal((2, 3)), [0.3, 0.3])
    traj = run_inversion(m, sched, r.standard_normal(3), Condition.of_class(0))
    out = edit(m, sched, traj, EditSpec(Condition.of_class(0), Condition.of_class(1)), "nmg")
    assert np.all(np.isfinite(out.edited.latents))


def test_disc_to_square_swap(sched, model):
    # oracle: nearest class centroid of the training images
    train = ModelRecipe().dataset()
    clf = NearestCentroid(train.images, train.labels)
    discs = heldout_images(10, seed=0, classes=(0,))
    hits = 0
    for img in discs.images:
        traj = run_inversion(model, sched, 2 * img - 1, Condition.of_class(0))
        out = edit(model, sched, traj, EditSpec(Condition.of_class(0), Condition.of_class(1)), "nmg")
        hits += int(clf.predict(to_image(out.edited_z0))[0] == 1)
    assert hits >= 8
