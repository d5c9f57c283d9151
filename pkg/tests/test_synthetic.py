import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat.bundle import MODALITIES, Tracks, load_bundle, sample_name, write_bundle
from headsplat.exceptions import BundleError, DataError
from headsplat.io import images
from headsplat.synthetic import (
    GroundTruth,
    OracleConfig,
    draw_sample,
    generate_oracle_scene,
    render_avatar,
    sampler_probabilities,
)


def test_sampler_probabilities_examples():
    assert sampler_probabilities([(3.0, 10)]).probabilities.tolist() == [1.0]
    np.testing.assert_allclose(sampler_probabilities([(1, 100), (1, 300)]).probabilities, [0.25, 0.75])
    with pytest.raises(ValueError):
        sampler_probabilities([(0, 10), (1, 0)])
    with pytest.raises(ValueError):
        sampler_probabilities([(-1, 10)])
    with pytest.raises(ValueError):
        sampler_probabilities([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.integers(0, 10_000)), min_size=1, max_size=6),
       st.floats(0.01, 1000))
def test_sampler_properties(datasets, k):
    if sum(p * s for p, s in datasets) <= 0:
        with pytest.raises(ValueError):
            sampler_probabilities(datasets)
        return
    p = sampler_probabilities(datasets).probabilities
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12
    w = np.array([a * b for a, b in datasets])
    np.testing.assert_allclose(p, w / w.sum(), atol=1e-15)
    scaled = sampler_probabilities([(a * k, b) for a, b in datasets]).probabilities
    np.testing.assert_allclose(scaled, p, atol=1e-12)


def test_draw_sample():
    single = sampler_probabilities([(1, 5)])
    rng = np.random.default_rng(0)
    assert {draw_sample(single, rng) for _ in range(100)} == {0}
    w = sampler_probabilities([(1, 100), (1, 300)])
    a = [draw_sample(w, np.random.default_rng(7)) for _ in range(3)]
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    assert [draw_sample(w, r1) for _ in range(500)] == [draw_sample(w, r2) for _ in range(500)]
    assert len(set(a)) == 1
    # zero-probability datasets are never drawn
    w0 = sampler_probabilities([(1, 10), (0, 10), (1, 10)])
    rng = np.random.default_rng(1)
    assert 1 not in {draw_sample(w0, rng) for _ in range(2000)}


def test_single_view_single_frame(tmp_path):
    bundle, truth = generate_oracle_scene(views=1, frames=1, resolution=32, holdout_views=0, seed=2)
    assert bundle.rgb.shape[:2] == (1, 1) and bundle.normal.shape[:2] == (1, 1)
    assert bundle.mask.shape[:2] == (1, 1) and bundle.posemap.shape[:2] == (1, 1)
    write_bundle(bundle, tmp_path / "b", truth)
    for mod in MODALITIES:
        assert sorted(p.name for p in (tmp_path / "b" / mod).iterdir()) == [sample_name(0, 0)]


def test_zero_noise_tracks_equal_truth(tiny_scene):
    bundle, truth = tiny_scene
    for name in ("shape", "expression", "joint_rotations", "global_rotation", "translation", "latents"):
        assert np.array_equal(getattr(bundle.tracks, name), getattr(truth.tracks, name)), name


def test_noisy_tracks_differ_by_configured_sigma():
    bundle, truth = generate_oracle_scene(views=1, frames=40, resolution=24, holdout_views=0, track_noise=True,
                                          n_expr=10, seed=3)
    d_rot = bundle.tracks.global_rotation - truth.tracks.global_rotation
    d_exp = bundle.tracks.expression - truth.tracks.expression
    assert abs(d_rot.std() - 0.02) < 0.005 and abs(d_exp.std() - 0.05) < 0.01
    assert np.array_equal(bundle.tracks.translation, truth.tracks.translation)
    assert np.array_equal(bundle.tracks.latents, truth.tracks.latents)


def test_scene_contents(tiny_scene):
    bundle, truth = tiny_scene
    assert bundle.rgb.shape == (2, 3, 48, 48, 3)
    np.testing.assert_array_equal(bundle.mask, (bundle.mask > 0.5).astype(float))
    assert 0.05 < bundle.mask.mean() < 0.9
    # the bundle images are renders of the ground truth
    from headsplat.remesh import remesh_uv

    remesh = remesh_uv(bundle.model, truth.remesh_resolution, truth.max_hops)
    rgb, normal, alpha = render_avatar(bundle.model, remesh, truth.cloud, truth.tracks.to_params(), 2, bundle.cameras[1])
    np.testing.assert_array_equal(rgb, bundle.rgb[1, 2])
    np.testing.assert_array_equal(bundle.mask[1, 2], (alpha > 0.5).astype(float))
    assert bundle.holdout is not None and bundle.holdout.rgb.shape == (1, 3, 48, 48, 3)


def test_generation_deterministic():
    a, _ = generate_oracle_scene(views=1, frames=2, resolution=24, holdout_views=0, seed=5)
    b, _ = generate_oracle_scene(views=1, frames=2, resolution=24, holdout_views=0, seed=5)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.tracks.expression, b.tracks.expression)


def test_no_foreground_aborts(monkeypatch):
    import headsplat.synthetic as synthetic
    from headsplat.render import Camera

    def away(n, resolution, *args, **kwargs):
        f = 2.0 * resolution
        return [Camera.look_at((0, 0, 0.5), (0, 0, 2.0), (0, 1, 0), f, f, resolution, resolution)] * n

    monkeypatch.setattr(synthetic, "ring_cameras", away)
    with pytest.warns(UserWarning, match="no foreground"), pytest.raises(DataError):
        generate_oracle_scene(views=1, frames=1, resolution=16, holdout_views=0)
    with pytest.raises(ValueError):
        generate_oracle_scene(views=0, frames=1)


def test_config_roundtrip():
    cfg = OracleConfig(views=3, background=(0.1, 0.2, 0.3))
    assert OracleConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.fixture(scope="module")
def written(tmp_path_factory, tiny_scene):
    bundle, truth = tiny_scene
    root = tmp_path_factory.mktemp("bundle") / "b"
    write_bundle(bundle, root, truth)
    return root


def test_bundle_roundtrip(written, tiny_scene):
    bundle, truth = tiny_scene
    back = load_bundle(written, load_posemaps=True)
    assert back.n_views == 2 and back.n_frames == 3
    assert np.abs(back.rgb - bundle.rgb).max() <= 0.5 / 255 + 1e-12
    assert np.abs(back.normal - bundle.normal).max() <= 1 / 65535
    assert np.abs(back.posemap - bundle.posemap).max() <= 1 / 65535
    np.testing.assert_array_equal(back.mask, bundle.mask)
    for name in ("expression", "joint_rotations", "global_rotation", "latents"):
        assert np.array_equal(getattr(back.tracks, name), getattr(bundle.tracks, name)), name
    assert back.meta["remesh_resolution"] == bundle.meta["remesh_resolution"]
    np.testing.assert_allclose(back.holdout.rgb, bundle.holdout.rgb, atol=1e-7)
    gt = GroundTruth.read(written / "gt")
    assert np.array_equal(gt.cloud.local_position.numpy(), truth.cloud.local_position.numpy().astype(np.float32))
    # writing twice gives identical files
    again = written.parent / "again"
    write_bundle(bundle, again, truth)
    for path in written.rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (again / path.relative_to(written)).read_bytes(), path


def test_tracks_json_roundtrip(tiny_scene):
    t = tiny_scene[0].tracks
    back = Tracks.from_json(json.loads(json.dumps(t.to_json())))
    for name in ("shape", "expression", "latents", "latent_mean", "latent_std"):
        assert np.array_equal(getattr(back, name), getattr(t, name)), name
    z = back.normalized_latents()
    np.testing.assert_allclose(z, (t.latents - t.latent_mean) / t.latent_std)


@pytest.mark.parametrize("modality", MODALITIES)
def test_missing_modality_file_rejected(written, tmp_path, modality):
    copy = tmp_path / "b"
    shutil.copytree(written, copy)
    (copy / modality / sample_name(1, 2)).unlink()
    with pytest.raises(BundleError, match="missing file"):
        load_bundle(copy)


def test_corrupted_and_incomplete_bundles(written, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(written, copy)
    images.write_rgb(copy / "rgb" / sample_name(0, 0), np.zeros((48, 48, 3)))
    with pytest.raises(BundleError, match="hash"):
        load_bundle(copy)
    assert load_bundle(copy, verify=False).rgb[0, 0].max() == 0
    (copy / "manifest.json").unlink()
    with pytest.raises(BundleError, match="manifest"):
        load_bundle(copy)
