import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentshield.evaluation.metrics import features, frechet_from_features, ia_score
from latentshield.threats import (
    EditError,
    EditRequest,
    EmptyMaskWarning,
    InversionDivergedError,
    generate,
    inpaint,
    invert_embedding,
    latent_mask,
    null_embedding,
    run_edit,
    sdedit,
    start_timestep,
)


def _rmse(a, b):
    return float(((a - b) ** 2).mean().sqrt())


def _center_mask(size, frac=0.5):
    m = np.zeros((size, size), np.float32)
    lo = int(size * (1 - frac) / 2)
    m[lo:size - lo, lo:size - lo] = 1
    return m


@given(s=st.floats(1e-6, 1.0), T=st.integers(2, 5000))
def test_start_timestep_in_range(s, T):
    t = start_timestep(s, T)
    assert 1 <= t <= T - 1
    assert t == round(s * T) or t in (1, T - 1)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.01])
def test_sdedit_rejects_bad_strength(tiny_bundle32, bad):
    with pytest.raises(EditError):
        sdedit(torch.rand(1, 3, 8, 8), tiny_bundle32, bad)


def test_edit_request_invariants():
    with pytest.raises(EditError):
        EditRequest(kind="inpaint")
    with pytest.raises(EditError):
        EditRequest(kind="sdedit", strength=None)
    with pytest.raises(EditError):
        EditRequest(kind="upscale")
    EditRequest(kind="embed_invert", strength=None)


def test_sdedit_deterministic_per_seed(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    a = sdedit(x, tiny_bundle32, 0.5, seed=3)
    assert torch.equal(a, sdedit(x, tiny_bundle32, 0.5, seed=3))
    assert not torch.equal(a, sdedit(x, tiny_bundle32, 0.5, seed=4))
    assert torch.equal(sdedit(x[0], tiny_bundle32, 0.5, seed=3), sdedit(x[:1], tiny_bundle32, 0.5, seed=3)[0])
    assert torch.equal(run_edit(EditRequest(strength=0.5, seed=3), x, tiny_bundle32), a)


def test_latent_mask_max_pools(tiny_bundle32):
    like = torch.zeros(1, 2, 4, 4)
    m = np.zeros((8, 8), np.float32)
    m[3, 5] = 1
    lm = latent_mask(m, tiny_bundle32, like)
    assert lm.shape == (1, 1, 4, 4) and lm.sum() == 1 and lm[0, 0, 1, 2] == 1
    with pytest.raises(EditError):
        latent_mask(np.zeros((4, 4)), tiny_bundle32, like)
    with pytest.raises(EditError):
        latent_mask(np.full((8, 8), 0.5), tiny_bundle32, like)


def test_empty_mask_warns_and_reconstructs(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    with pytest.warns(EmptyMaskWarning):
        out = inpaint(x, np.zeros((8, 8)), tiny_bundle32)
    assert torch.equal(out, tiny_bundle32.reconstruct(x))


def test_full_mask_ignores_input(tiny_bundle32):
    a = inpaint(torch.rand(1, 3, 8, 8), np.ones((8, 8)), tiny_bundle32, steps=5, seed=2)
    b = inpaint(torch.rand(1, 3, 8, 8), np.ones((8, 8)), tiny_bundle32, steps=5, seed=2)
    torch.testing.assert_close(a, b)


def test_inpaint_deterministic(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    m = _center_mask(8)
    assert torch.equal(inpaint(x, m, tiny_bundle32, steps=5, seed=1), inpaint(x, m, tiny_bundle32, steps=5, seed=1))


def test_invert_embedding_contract(tiny_bundle32):
    x = torch.rand(4, 3, 8, 8)
    with pytest.raises(EditError):
        invert_embedding(x[:2], tiny_bundle32)
    assert torch.equal(invert_embedding(x, tiny_bundle32, iters=0), null_embedding(tiny_bundle32))
    v, trace = invert_embedding(x, tiny_bundle32, iters=5, lr=1e-2, return_trace=True)
    assert len(trace) == 5 and not torch.equal(v, null_embedding(tiny_bundle32))
    bad = torch.full_like(null_embedding(tiny_bundle32), float("nan"))
    with pytest.raises(InversionDivergedError) as ei:
        invert_embedding(x, tiny_bundle32, iters=3, init=bad)
    assert ei.value.iteration == 0


def test_generate_contract(tiny_bundle32):
    assert generate(tiny_bundle32, count=0) == []
    a = generate(tiny_bundle32, count=3, seed=5, steps=4)
    b = generate(tiny_bundle32, count=3, seed=5, steps=4)
    assert len(a) == 3 and all(torch.equal(u, v) for u, v in zip(a, b))
    assert all(0 <= float(u.min()) and float(u.max()) <= 1 for u in a)


# -- trained bundle ---------------------------------------------------------------------

@pytest.mark.slow
def test_sdedit_smallest_strength_is_near_reconstruction(bundle_a, eval_x):
    rec = bundle_a.reconstruct(eval_x)
    out = sdedit(eval_x, bundle_a, 1.0 / bundle_a.schedule.T)
    assert _rmse(out, rec) <= 2 * _rmse(rec, eval_x)


@pytest.mark.slow
def test_full_strength_sdedit_matches_sample_statistics(bundle_a, eval_x):
    out = torch.stack(list(sdedit(eval_x, bundle_a, 1.0, seed=1)))
    fresh = torch.stack(generate(bundle_a, count=len(eval_x), seed=2))
    f_out, f_fresh, f_in = (features(v, bundle_a) for v in (out, fresh, eval_x))
    assert frechet_from_features(f_out, f_fresh) < frechet_from_features(f_out, f_in)


@pytest.mark.slow
def test_full_mask_inpaint_matches_sample_statistics(bundle_a, eval_x):
    out = inpaint(eval_x, np.ones((32, 32)), bundle_a, seed=1)
    fresh = torch.stack(generate(bundle_a, count=len(eval_x), seed=2))
    f_out, f_fresh, f_in = (features(v, bundle_a) for v in (out, fresh, eval_x))
    assert frechet_from_features(f_out, f_fresh) < frechet_from_features(f_out, f_in)


@pytest.mark.slow
def test_sdedit_similarity_nonincreasing_in_strength(bundle_a, eval_x):
    sims = [float(np.mean(ia_score(sdedit(eval_x, bundle_a, s, seed=0), eval_x, bundle_a)))
            for s in (0.1, 0.3, 0.6)]
    assert sims[0] >= sims[1] >= sims[2]


@pytest.mark.slow
def test_inpaint_keeps_known_region(bundle_a, eval_x):
    m = _center_mask(32)
    rec = bundle_a.reconstruct(eval_x)
    out = inpaint(eval_x, m, bundle_a, seed=0)
    known = torch.from_numpy(1 - m).bool().expand_as(eval_x)
    err = float(((out - rec)[known] ** 2).mean().sqrt())
    assert err < 1.5 * _rmse(rec, eval_x)


@pytest.mark.slow
def test_protection_degrades_inpainting(bundle_a, eval_x, protections):
    m = _center_mask(32)
    region = lambda v: v * torch.from_numpy(m)
    ref = region(inpaint(eval_x, m, bundle_a, seed=0))
    base = np.mean(ia_score(region(inpaint(eval_x, m, bundle_a, seed=1)), ref, bundle_a))
    for method in ("advdm", "mist"):
        out = region(inpaint(protections[method]["x_adv"], m, bundle_a, seed=1))
        assert np.mean(ia_score(out, ref, bundle_a)) < base


@pytest.mark.slow
def test_inverted_embedding_lands_near_its_class(bundle_a, eval_set):
    c = 2
    imgs = torch.from_numpy(eval_set.images[eval_set.labels == c])
    emb = invert_embedding(imgs, bundle_a, seed=0)
    gen = torch.stack(generate(bundle_a, cond=emb, count=32, seed=3))
    fg = features(gen, bundle_a).mean(0)
    sims = {}
    for k in np.unique(eval_set.labels):
        fk = features(torch.from_numpy(eval_set.images[eval_set.labels == k]), bundle_a).mean(0)
        sims[int(k)] = float(fg @ fk / (np.linalg.norm(fg) * np.linalg.norm(fk)))
    assert max(sims, key=sims.get) == c, sims


@pytest.mark.slow
def test_generated_set_closer_to_data_than_noise(bundle_a):
    # 256-dim features need a few hundred samples before covariance estimates settle
    from latentshield.recipes import train_set
    f_data = features(torch.from_numpy(train_set().images), bundle_a)
    gen = torch.stack(generate(bundle_a, count=256, seed=0))
    noise = torch.rand(256, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert frechet_from_features(features(gen, bundle_a), f_data) < \
        frechet_from_features(features(noise, bundle_a), f_data)
