import numpy as np
import pytest

from aesm2.checkpoint import load_checkpoint, load_into, read_checkpoint, save_checkpoint
from aesm2.errors import CheckpointError
from aesm2.model import MODEL_KINDS, ModelConfig, build_model

from conftest import random_dataset


def _perturbed(schema, kind, seed=0):
    model = build_model(kind, ModelConfig.for_schema(schema, seed=seed))
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        # full-precision values, not the tidy ones from init
        t.data[...] = rng.normal(size=t.shape) * np.pi
    return model


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_round_trip_is_bit_exact(tmp_path, schema, kind):
    model = _perturbed(schema, kind)
    path = save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(path)
    assert back.kind == kind and back.config == model.config
    assert set(back.params) == set(model.params)
    for name, t in model.params.items():
        assert back.params[name].data.tobytes() == t.data.tobytes()
    ds = random_dataset(schema, 50)
    a, b = model.predict(ds), back.predict(ds)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_overwrite_is_atomic(tmp_path, schema):
    path = tmp_path / "m.npz"
    save_checkpoint(_perturbed(schema, "aesm2", 0), path)
    save_checkpoint(_perturbed(schema, "aesm2", 1), path)
    assert [p.name for p in tmp_path.iterdir()] == ["m.npz"]
    _, params = read_checkpoint(path)
    assert params["task_embed"].tobytes() == _perturbed(schema, "aesm2", 1).params["task_embed"].data.tobytes()


def test_mismatch_lists_every_offending_tensor(tmp_path, schema):
    path = save_checkpoint(_perturbed(schema, "aesm2"), tmp_path / "m.npz")
    wider = ModelConfig.for_schema(schema, expert_dim=16, n_task_experts=7)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(path, config=wider)
    msg = str(info.value)
    assert "scenario.0.expert.0.W" in msg and "task.0.expert.6.W: missing" in msg
    assert "scenario.0.expert.0.W: checkpoint (48, 32) vs model (48, 16)" in msg


def test_wrong_model_kind(tmp_path, schema):
    path = save_checkpoint(_perturbed(schema, "hard_sharing"), tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="not a parameter of this model"):
        load_checkpoint(path, kind="aesm2")


def test_load_into_rejects_partial_state(schema):
    model = _perturbed(schema, "mmoe")
    state = {k: v.data.copy() for k, v in model.params.items()}
    state.pop("task_embed")
    with pytest.raises(CheckpointError, match="task_embed: missing"):
        load_into(model, state)


def test_unreadable_files(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        read_checkpoint(tmp_path / "none.npz")
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        read_checkpoint(junk)
    other = tmp_path / "other.npz"
    np.savez(other, x=np.ones(2))
    with pytest.raises(CheckpointError, match="format"):
        read_checkpoint(other)
