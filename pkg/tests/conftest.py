import pytest

from routetime.model import ModelConfig
from routetime.pipeline import prepare_data, save_artifacts
from routetime.synth import WorldConfig, emit_dataset, generate_records, generate_world
from routetime.training import TrainConfig, train

TINY_L_H = 6
TINY_L_F = 8


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """A small but complete generated dataset directory."""
    out = tmp_path_factory.mktemp("tiny-data")
    config = WorldConfig(n_aoi=12, grid_km=4.0, n_couriers=3, n_days=10,
                         deliveries_per_day=7.0, pickup_rate_per_hour=0.25,
                         seed=42)
    world = generate_world(config)
    emit_dataset(generate_records(world), out, world)
    return out


@pytest.fixture(scope="session")
def tiny_prepared(tiny_data_dir):
    return prepare_data(tiny_data_dir, l_h=TINY_L_H, l_f=TINY_L_F)


@pytest.fixture(scope="session")
def tiny_artifacts(tiny_data_dir, tiny_prepared, tmp_path_factory):
    """Artifacts from a one-epoch training run on the tiny dataset."""
    out = tmp_path_factory.mktemp("tiny-artifacts")
    prep = tiny_prepared
    config = ModelConfig(d_input=prep.stats.d_model_input, d_model=16,
                         n_blocks=1, n_heads=2, l_h=TINY_L_H, l_f=TINY_L_F,
                         l_m=6)
    tc = TrainConfig(batch_size=32, lr=1e-3, epochs=1, seed=11)
    result = train(prep.encoded["train"], prep.encoded["val"], config, tc,
                   prep.tensors)
    save_artifacts(out, result, config, prep.stats, prep.tensors,
                   prep.aoi_lats, prep.aoi_lons, tc.seed)
    return out
