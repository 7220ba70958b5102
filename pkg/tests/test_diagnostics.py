import csv

import numpy as np
import pytest
import torch

from conftest import make_tiny_bundle
from latentshield.attacks import make_method, pgd_protect
from latentshield.diagnostics import (
    budget_ratio,
    denoiser_robustness_probe,
    loss_curve_compare,
    pixel_dm_attack_probe,
    protection_score,
    roundtrip_reflection,
    similarity,
    transfer_probe,
)
from latentshield.diffusion import make_schedule
from latentshield.models import PixelDmBundle
from latentshield.nets import PixelUNet
from latentshield.threats import sdedit

TS = (10, 30, 50, 70, 90)


def tiny_pixel_bundle():
    torch.manual_seed(0)
    den = PixelUNet(3, width=8, emb_dim=16, num_classes=2)
    return PixelDmBundle(den, make_schedule(100, 1e-3, 0.2), {"trained": True, "image_size": 8}).freeze()


def test_budget_ratio_undefined_for_unprotected(tiny_bundle32):
    x = torch.rand(3, 3, 8, 8)
    rep = budget_ratio(x, x, tiny_bundle32)
    assert np.all(rep.delta_x == 0) and np.all(rep.delta_z == 0)
    assert np.all(np.isnan(rep.ratio)) and np.isnan(rep.median())


def test_budget_ratio_values_and_outputs(tmp_path, tiny_bundle32):
    x = torch.rand(8, 3, 8, 8)
    r = pgd_protect(x, tiny_bundle32, make_method("advdm", iters=3))
    labels = np.arange(8) % 4
    rep = budget_ratio(x, r.x_adv, tiny_bundle32, labels)
    assert np.all(rep.delta_x <= 16 / 255 + 1e-6)
    assert np.all(np.isfinite(rep.ratio) & (rep.ratio > 0))
    np.testing.assert_allclose(rep.ratio, rep.delta_z / rep.delta_x)
    assert set(rep.per_domain()) == {"flat", "painterly", "scenery", "figure"}
    rows = list(csv.DictReader(open(rep.write_histogram_csv(tmp_path / "h.csv"))))
    assert {r["domain"] for r in rows} == {"all", "flat", "painterly", "scenery", "figure"}
    assert sum(int(r["count"]) for r in rows if r["domain"] == "all") == 8
    assert len(list(csv.DictReader(open(rep.write_csv(tmp_path / "r.csv"))))) == 8


def test_reflection_identity_edit_is_near_one(tiny_bundle32):
    x = torch.rand(4, 3, 8, 8)
    sims = roundtrip_reflection(x, tiny_bundle32, strength=1 / 100, steps=1)
    assert np.all(sims > 0.95)


def test_robustness_probe_rows_and_zero_budget(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    rows = denoiser_robustness_probe(tiny_bundle32, x, [0.0, 0.5, 2.0], iters=3, timesteps=TS)
    assert len(rows) == 3
    assert rows[0]["similarity"] == 1.0 and rows[0]["loss_delta"] == 0.0


def test_loss_curves_start_equal_and_have_n_plus_one_points(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    pair = (make_method("advdm", iters=4), make_method("sds_plus", iters=4))
    lc = loss_curve_compare(x, tiny_bundle32, pair, timesteps=TS)
    assert len(lc.full) == len(lc.sds) == 5
    assert lc.full[0] == lc.sds[0]
    with pytest.raises(ValueError):
        loss_curve_compare(x, tiny_bundle32, (make_method("advdm", iters=4), make_method("sds_plus", iters=5)), timesteps=TS)


def test_protection_and_transfer_trivial_cases(tiny_bundle32):
    x = torch.rand(3, 3, 8, 8)
    np.testing.assert_allclose(protection_score(x, x, tiny_bundle32), 0.0, atol=1e-6)
    x_adv = pgd_protect(x, tiny_bundle32, make_method("advdm", iters=3)).x_adv
    t = transfer_probe(x, x_adv, tiny_bundle32, tiny_bundle32)
    assert t["transfer"] == t["native"]
    other = make_tiny_bundle(size=16, dtype=torch.float32)
    with pytest.raises(ValueError):
        transfer_probe(x, x_adv, tiny_bundle32, other)


def test_pixel_probe_zero_budget_is_identity(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    pb = tiny_pixel_bundle()
    out = pixel_dm_attack_probe(pb, x, budget=0.0, metric_bundle=tiny_bundle32)
    assert out["similarity"] == pytest.approx(1.0) and out["linf"] == 0.0
    out = pixel_dm_attack_probe(pb, x, budget=4 / 255, iters=2, metric_bundle=tiny_bundle32)
    assert out["linf"] <= 4 / 255 + 1e-6


def test_diagnostics_are_pure(tiny_bundle32):
    x = torch.rand(2, 3, 8, 8)
    a = denoiser_robustness_probe(tiny_bundle32, x, [0.5], iters=2, seed=3, timesteps=TS)
    b = denoiser_robustness_probe(tiny_bundle32, x, [0.5], iters=2, seed=3, timesteps=TS)
    assert a == b


@pytest.fixture(scope="module")
def robustness_rows(bundle_a, eval_x):
    rows = denoiser_robustness_probe(bundle_a, eval_x[:32], [16 / 255, 32 / 255, 1.0])
    return {r["budget"]: r for r in rows}


@pytest.fixture(scope="module")
def encoder_attack_similarity(bundle_a, eval_x, protections):
    x = eval_x[:32]
    return similarity(sdedit(protections["advdm"]["x_adv"][:32], bundle_a, 0.3, seed=0),
                      sdedit(x, bundle_a, 0.3, seed=0), bundle_a).mean()


@pytest.mark.slow
@pytest.mark.parametrize("budget", [
    16 / 255,
    32 / 255,
    pytest.param(1.0, marks=pytest.mark.xfail(
        strict=True, reason="a unit latent budget moves every standardized latent element by one "
                            "std; the decoder renders that change directly (measured 0.952 vs 0.971)")),
])
def test_denoiser_stays_robust_across_latent_budgets(robustness_rows, encoder_attack_similarity, budget):
    r = robustness_rows[budget]
    assert r["loss_delta"] > 0
    assert r["similarity"] > encoder_attack_similarity


@pytest.mark.slow
def test_unprotected_transfer_score_near_zero(bundle_a, bundle_b, eval_x):
    t = transfer_probe(eval_x[:32], eval_x[:32], bundle_a, bundle_b)
    assert abs(t["transfer"]) < 1e-6 and abs(t["native"]) < 1e-6
