"""Regenerate the example run configs in configs/ from the dataclass defaults."""

from pathlib import Path

from selfflow import ablation as A
from selfflow import config as C

OUT = Path(__file__).resolve().parents[1] / "configs"

if __name__ == "__main__":
    C.save(C.RunConfig(), OUT / "default.toml")
    C.save(A.desk_config(), OUT / "desk.toml")
    C.save(A.desk_config().with_overrides(objective={"variant": "vanilla"}), OUT / "desk_vanilla.toml")
