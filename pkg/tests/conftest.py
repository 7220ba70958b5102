import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("LATENTSHIELD_CACHE", str(ROOT / ".cache"))
torch.set_num_threads(1)

from latentshield import recipes  # noqa: E402
from latentshield.attacks import METHODS, make_method, pgd_protect  # noqa: E402
from latentshield.diffusion import make_schedule  # noqa: E402
from latentshield.models import LatentStats, LdmBundle  # noqa: E402
from latentshield.nets import Decoder, Denoiser, Encoder  # noqa: E402

ACCEPTANCE = {}


def record(criterion: int, name: str, passed: bool, detail: str = ""):
    ACCEPTANCE[criterion] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{k:2d}] {name}: {detail}")


def make_tiny_bundle(size=8, seed=0, dtype=torch.float64, trained=True):
    """A < 10k-parameter bundle with random (non-zero) weights everywhere."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    enc = Encoder(3, 2, width=4, n_down=1)
    dec = Decoder(3, 2, width=4, n_down=1)
    den = Denoiser(2, width=8, depth=1, emb_dim=16, num_classes=2)
    with torch.no_grad():
        den.out.weight.copy_(0.2 * torch.randn(den.out.weight.shape, generator=g))
        den.out.bias.copy_(0.1 * torch.randn(den.out.bias.shape, generator=g))
    stats = LatentStats(0.1 * torch.randn(2, generator=g), 0.5 + torch.rand(2, generator=g), 0)
    b = LdmBundle(enc, dec, den, make_schedule(100, 1e-3, 0.2), stats,
                  {"trained": trained, "image_size": size})
    return b.freeze().to(dtype)


@pytest.fixture
def tiny_bundle():
    return make_tiny_bundle()


@pytest.fixture
def tiny_bundle32():
    return make_tiny_bundle(dtype=torch.float32)


# -- trained default bundles (cached on disk) ------------------------------------------

@pytest.fixture(scope="session")
def bundle_a():
    return recipes.load_or_train("ldm_a")


@pytest.fixture(scope="session")
def bundle_b():
    return recipes.load_or_train("ldm_b")


@pytest.fixture(scope="session")
def pixel_bundle():
    return recipes.load_or_train("pixel")


@pytest.fixture(scope="session")
def eval_set():
    return recipes.eval_set()


@pytest.fixture(scope="session")
def eval_x(eval_set):
    return torch.from_numpy(eval_set.images)


def _code_digest():
    h = hashlib.sha256()
    src = ROOT / "src" / "latentshield"
    for name in ("attacks.py", "diffusion.py", "nets.py", "models.py", "data.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def protections(bundle_a, eval_x):
    """Default-config protections of the 64 evaluation images for all seven
    methods on bundle A, cached on disk keyed by model recipe and code."""
    key = f"{recipes.recipe_hash('ldm_a')}-{_code_digest()}"
    path = recipes.cache_root() / "protections" / f"default-{key}.pt"
    if path.exists():
        return torch.load(path)
    out = {}
    for m in METHODS:
        r = pgd_protect(eval_x, bundle_a, make_method(m, seed=0))
        out[m] = {"x_adv": r.x_adv, "seconds_per_iter": r.grad_seconds_per_iter}
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(out, path)
    return out
