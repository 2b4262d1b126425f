import numpy as np
import pytest
import torch

from crend.inference import default_n_points, predict_volume, threshold
from crend.phantom import PhantomSpec, generate_phantom
from crend.training import TOY_PROFILE, build_models, save_checkpoint, with_overrides
from crend.volume import Volume


@pytest.fixture(scope="module")
def untrained():
    cfg = with_overrides(TOY_PROFILE, seed=1)
    model, head = build_models(cfg)
    model.eval()
    head.eval()
    return model, head, cfg


def test_single_patch_equals_direct_forward(untrained):
    model, head, cfg = untrained
    v, _ = generate_phantom(PhantomSpec(volume_dims=(32, 32, 16), seed=2))
    pred = predict_volume(untrained, v, refine=False)
    with torch.no_grad():
        direct = model(torch.from_numpy(v.data.astype(np.float32))[None, None]).probs[0].numpy()
    assert np.array_equal(pred.probs, direct)
    assert len(pred.refined_voxels) == 0


def test_refine_changes_only_selected_voxels(untrained):
    v, _ = generate_phantom(PhantomSpec(volume_dims=(40, 36, 20), seed=3))
    base = predict_volume(untrained, v, refine=False)
    ref = predict_volume(untrained, v, refine=True, seed=4)
    changed = np.argwhere(np.any(base.probs != ref.probs, axis=0))
    selected = {tuple(x) for x in ref.refined_voxels.tolist()}
    assert {tuple(x) for x in changed.tolist()} <= selected
    assert np.array_equal(base.probs, ref.coarse_probs)
    agree = np.mean(np.all(base.probs == ref.probs, axis=0))
    assert agree >= 1 - default_n_points(v.shape) / np.prod(v.shape)


def test_refine_is_deterministic(untrained):
    v, _ = generate_phantom(PhantomSpec(seed=5))
    a = predict_volume(untrained, v, seed=1)
    b = predict_volume(untrained, v, seed=1)
    assert a.probs.tobytes() == b.probs.tobytes()


def test_nesting_enforced():
    probs = np.zeros((2, 3, 3, 3), np.float32)
    probs[0] = 0.9
    probs[1, 0] = 0.9
    m = threshold(probs)
    assert m.follicle.sum() == 9
    assert not np.any(m.follicle & ~m.ovary)


def test_loads_from_checkpoint_path(untrained, tmp_path):
    model, head, cfg = untrained
    path = save_checkpoint(tmp_path / "m.pt", model, head, cfg)
    v = Volume(np.random.default_rng(0).random((32, 32, 16)).astype(np.float32))
    a = predict_volume(path, v)
    b = predict_volume(untrained, v)
    assert np.array_equal(a.probs, b.probs)
