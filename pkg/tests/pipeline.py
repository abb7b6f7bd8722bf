"""Drive the CLI in-process on a tiny configuration."""

from pathlib import Path

from splat4d.cli import main

TINY_CONFIG = """\
[scene]
preset = rigid-translate
count = 20

[rig]
views = 4
times = 3
width = 32
height = 32
focal = 35

[static]
steps = 60
init_count = 40
densify_every = 20
densify_from = 20

[dynamic]
steps = 15
batch_size = 2
base_resolution = 4
levels = 1
features = 4
hidden = 16
"""


def run(*args) -> int:
    return main([str(a) for a in args])


def full_pipeline(root: Path, seed: int = 0, threads: int = 1) -> Path:
    """synth -> fit-static -> fit-4d -> render -> eval; returns the eval directory."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    common = ["--config", cfg, "--seed", seed, "--threads", threads]
    assert run(*common, "--out", root / "matrix", "synth") == 0
    assert run(*common, "--out", root / "static", "fit-static", root / "matrix") == 0
    assert run(*common, "--out", root / "field", "fit-4d", root / "matrix", root / "static" / "cloud.ply") == 0
    assert run(*common, "--out", root / "render", "render", root / "static" / "cloud.ply",
               "--field", root / "field" / "field.bin", "--matrix", root / "matrix") == 0
    assert run(*common, "--out", root / "eval", "eval", root / "render", root / "matrix") == 0
    return root / "eval"
