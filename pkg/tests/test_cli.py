import hashlib
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from latentshield.cli import main
from latentshield.cli.config import DEFAULTS, ConfigError, load_config
from latentshield.cli.stages import derive_seed
from latentshield.data import load_png, save_mask_png
from latentshield import recipes


def _write(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")], err


def _err_json(err):
    return json.loads([line for line in err.splitlines() if line.startswith("{")][-1])


@pytest.fixture(scope="module")
def checkpoint():
    recipes.load_or_train("ldm_a")
    return str(next((recipes.cache_root() / "models").glob(f"ldm_a-{recipes.recipe_hash('ldm_a')}.lshd")))


def small_config(checkpoint, **over):
    cfg = {"schema_version": 1, "output_dir": "out", "seed": 3,
           "dataset": {"per_domain": 0},
           "eval_dataset": {"per_domain": 2},
           "models": {"primary": {"checkpoint": checkpoint}},
           "attacks": [{"method": "advdm", "iters": 2}, {"method": "sdst", "iters": 2}],
           "edits": [{"kind": "sdedit", "strength": 0.3}],
           "diagnostics": {"robustness_budgets": [0, 0.1], "robustness_images": 2, "loss_curve_images": 2,
                           "pixel_probe": False, "transfer": False}}
    cfg.update(over)
    return cfg


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "manifest.json" and p.suffix != ".md":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- config -----------------------------------------------------------------------------

def test_unknown_key_rejected(tmp_path, capsys):
    p = _write(tmp_path, {"schema_version": 1, "output_dir": "o", "atacks": []})
    code, _, err = _run(["protect", "--config", p], capsys)
    assert code == 2
    e = _err_json(err)
    assert e["error"] == "config_error" and e["command"] == "protect" and "atacks" in e["message"]


@pytest.mark.parametrize("bad", [
    {"schema_version": 2, "output_dir": "o"},
    {"schema_version": 1},
    {"schema_version": 1, "output_dir": "o", "edits": [{"kind": "sdedit"}]},
    {"schema_version": 1, "output_dir": "o", "edits": [{"kind": "inpaint"}]},
    {"schema_version": 1, "output_dir": "o", "attacks": [{"method": "glaze"}]},
    {"schema_version": 1, "output_dir": "o", "attacks": [{"method": "advdm", "budget": 2}]},
])
def test_schema_violations(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, bad))


def test_defaults_and_seed_override(tmp_path):
    cfg = load_config(_write(tmp_path, {"schema_version": 1, "output_dir": "o"}), seed_override=9)
    assert cfg["seed"] == 9
    assert [a["method"] for a in cfg["attacks"]] == [a["method"] for a in DEFAULTS["attacks"]]
    assert [e["strength"] for e in cfg["edits"]] == [0.2, 0.3]
    assert cfg["output_dir"] == str((tmp_path / "o").resolve())


def test_missing_config_file(tmp_path, capsys):
    code, _, err = _run(["train", "--config", tmp_path / "nope.json"], capsys)
    assert code == 2 and _err_json(err)["error"] == "config_error"


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, 1, "advdm", 0) == derive_seed(0, 1, "advdm", 0)
    assert derive_seed(0, 1, "advdm", 0) != derive_seed(0, 2, "advdm", 0)
    assert 0 <= derive_seed("x") < 2 ** 31


# -- stages -----------------------------------------------------------------------------

def test_missing_upstream(tmp_path, capsys, checkpoint):
    p = _write(tmp_path, small_config(checkpoint))
    code, _, err = _run(["protect", "--config", p], capsys)
    assert code == 3 and _err_json(err)["error"] == "missing_upstream"


def test_gen_data_deterministic_and_empty(tmp_path, capsys, checkpoint):
    for name in ("a", "b"):
        p = _write(tmp_path, small_config(checkpoint, output_dir=name), f"{name}.json")
        assert _run(["gen-data", "--config", p], capsys)[0] == 0
    assert _tree_digest(tmp_path / "a" / "data") == _tree_digest(tmp_path / "b" / "data")
    man = json.loads((tmp_path / "a" / "data" / "train" / "manifest.json").read_text())
    assert man["images"] == [] and not list((tmp_path / "a" / "data" / "train").glob("*.png"))
    ev = json.loads((tmp_path / "a" / "data" / "eval" / "manifest.json").read_text())
    assert {e["domain"] for e in ev["images"]} == {"flat", "painterly", "scenery", "figure"}


def test_gen_data_refuses_foreign_output(tmp_path, capsys, checkpoint):
    (tmp_path / "out" / "data").mkdir(parents=True)
    (tmp_path / "out" / "data" / "stray.png").write_bytes(b"x")
    p = _write(tmp_path, small_config(checkpoint))
    code, _, err = _run(["gen-data", "--config", p], capsys)
    assert code == 4 and _err_json(err)["error"] == "output_exists"
    assert _run(["gen-data", "--config", p, "--force"], capsys)[0] == 0


def test_corrupt_checkpoint_exit_code(tmp_path, capsys, checkpoint):
    bad = tmp_path / "bad.lshd"
    bad.write_bytes(Path(checkpoint).read_bytes()[:100])
    p = _write(tmp_path, small_config(str(bad)))
    assert _run(["gen-data", "--config", p], capsys)[0] == 0
    code, _, err = _run(["train", "--config", p], capsys)
    assert code == 5 and _err_json(err)["error"] == "checkpoint_error"


def test_zero_iteration_protect_is_identity(tmp_path, capsys, checkpoint):
    p = _write(tmp_path, small_config(checkpoint, attacks=[{"method": "mist", "iters": 0}]))
    for cmd in ("gen-data", "train", "protect"):
        assert _run([cmd, "--config", p], capsys)[0] == 0
    for f in (tmp_path / "out" / "data" / "eval").glob("*.png"):
        np.testing.assert_array_equal(load_png(f), load_png(tmp_path / "out" / "protect" / "mist" / f.name))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, checkpoint):
    root = tmp_path_factory.mktemp("pipe")
    save_mask_png(np.pad(np.ones((16, 16)), 8), root / "mask.png")
    cfg = small_config(checkpoint, edits=[{"kind": "sdedit", "strength": 0.3},
                                          {"kind": "inpaint", "mask": "mask.png", "steps": 5},
                                          {"kind": "embed_invert", "iters": 3, "count": 2}])
    p = _write(root, cfg)
    assert main(["all", "--config", str(p)]) == 0
    return root, p


def test_pipeline_outputs_reachable_from_manifest(pipeline):
    root, _ = pipeline
    out = root / "out"
    man = json.loads((out / "manifest.json").read_text())
    listed = {a for st in man["stages"].values() for a in st["artifacts"]}
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert on_disk == listed
    assert all(st["status"] == "complete" for st in man["stages"].values())
    assert "feature-based analog" in (out / "evaluate" / "metrics.csv").read_text()


def test_rerun_is_cached(pipeline, capsys):
    root, p = pipeline
    before = _tree_digest(root / "out")
    code, status, _ = _run(["all", "--config", p], capsys)
    assert code == 0 and status and all(s["status"] == "cached" for s in status)
    man = json.loads((root / "out" / "manifest.json").read_text())
    assert all(st["status"] == "cached" for st in man["stages"].values())
    assert _tree_digest(root / "out") == before


def _untimed(root):
    """Digest of everything except wall-clock fields (sidecars and timing rows)."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if not p.is_file() or p.suffix in (".json", ".md"):
            continue
        data = p.read_bytes()
        if p.suffix == ".csv":
            data = b"\n".join(l for l in data.splitlines() if b"seconds_per_iter" not in l)
        h.update(str(p.relative_to(root)).encode() + data)
    return h.hexdigest()


def test_force_reproduces_identical_bytes(pipeline, capsys):
    root, p = pipeline
    before = {sub: _untimed(root / "out" / sub) for sub in ("protect", "edit", "evaluate")}
    for cmd in ("protect", "edit", "evaluate"):
        assert _run([cmd, "--config", p, "--force", "--jobs", "2"], capsys)[0] == 0
    for sub, digest in before.items():
        assert _untimed(root / "out" / sub) == digest, sub


def test_console_script_reports_json_errors(tmp_path):
    p = _write(tmp_path, {"schema_version": 1, "output_dir": "o", "bogus": 1})
    exe = shutil.which("latentshield")
    for cmd in ([exe] if exe else []) + [[sys.executable, "-m", "latentshield.cli"]]:
        cmd = cmd if isinstance(cmd, list) else [cmd]
        r = subprocess.run(cmd + ["report", "--config", str(p)], capture_output=True, text=True)
        assert r.returncode == 2
        assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "config_error"


@pytest.mark.slow
def test_default_pipeline_with_trained_checkpoint_fits_budget(tmp_path, capsys, checkpoint):
    """Default attacks (7 methods x 100 iterations) and edits on 64 images."""
    cfg = {"schema_version": 1, "output_dir": "out", "dataset": {"per_domain": 0},
           "models": {"primary": {"checkpoint": checkpoint}},
           "diagnostics": {"budget_ratio": False, "reflection": False, "loss_curves": False,
                           "robustness_budgets": [], "transfer": False, "pixel_probe": False}}
    p = _write(tmp_path, cfg)
    t0 = time.perf_counter()
    for cmd in ("gen-data", "train", "protect", "edit", "evaluate", "report"):
        assert _run([cmd, "--config", p], capsys)[0] == 0
    assert time.perf_counter() - t0 < 2 * 3600
    agg = (tmp_path / "out" / "evaluate" / "metrics_aggregate.csv").read_text()
    assert agg.count("\nprotection,sdst,ia_score") == 2
