import json
from pathlib import Path

import numpy as np
import pytest

from lipfield import cli
from lipfield.experiments import recipe_points, recipes

RECIPES = Path(__file__).parent.parent / "recipes"


def test_recipe_directory_is_current():
    shipped = {p.name for p in RECIPES.iterdir()}
    assert shipped == set(recipes()) | set(recipe_points())


@pytest.mark.parametrize("name", sorted(recipes()))
def test_recipe_matches_experiment(name):
    kind, cfg, raw = cli.parse_config(RECIPES / name)
    expected = recipes()[name]
    assert raw == json.loads(json.dumps(expected))
    if kind == "field":
        # short shape forms must expand to the exact experiment shapes
        from lipfield.optim import TrainConfig
        full = TrainConfig.from_dict(expected, RECIPES).to_dict()
        assert cfg.to_dict() == full


@pytest.mark.parametrize("name", sorted(recipe_points()))
def test_recipe_points(name):
    pts = cli.read_points(RECIPES / name, 2)
    np.testing.assert_array_equal(pts, recipe_points()[name])


def test_star_recipe_expands_to_interp_config():
    from lipfield.experiments import interp_config
    _, cfg, _ = cli.parse_config(RECIPES / "star_lipschitz.json")
    ref = interp_config("lipschitz", 0).to_dict()
    assert cfg.to_dict() == ref


def test_torus_recipe_trains(tmp_path):
    raw = json.loads((RECIPES / "torus_interp.json").read_text())
    raw.update(epochs=1)
    raw["sample_plan"]["n_total"] = 256
    path = tmp_path / "torus.json"
    path.write_text(json.dumps(raw))
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    params, _ = cli.load_checkpoint(tmp_path / "run" / "checkpoint.json")
    assert params.spatial_dim == 3 and params.latent_dim == 1
