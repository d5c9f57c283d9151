import logging
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from headsplat.exceptions import GdhmFormatError, ModelValidationError
from headsplat.gaussians import GaussianCloud, init_cloud, promote_to_world
from headsplat.io import images
from headsplat.io.checkpoint import config_hash, load_checkpoint, save_checkpoint
from headsplat.io.gdhm import decode, encode, read_gdhm, write_gdhm
from headsplat.io.model_file import load_model, model_chunks, save_model
from headsplat.io.ply import PROPERTIES, export_ply, read_ply


def _chunks():
    rng = np.random.default_rng(0)
    return {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "b": np.arange(5, dtype=np.int32),
        "scalar": np.array(2.5, dtype=np.float32),
        "empty": np.zeros((0, 3), dtype=np.float32),
        "bytes": np.frombuffer(b"hello", dtype=np.uint8),
    }


def test_gdhm_roundtrip_bit_exact(tmp_path):
    chunks = _chunks()
    write_gdhm(tmp_path / "x.gdhm", chunks)
    back = read_gdhm(tmp_path / "x.gdhm")
    assert list(back) == list(chunks)
    for k in chunks:
        assert back[k].dtype == chunks[k].dtype and back[k].shape == chunks[k].shape
        assert np.array_equal(back[k], chunks[k])
    assert encode(back) == (tmp_path / "x.gdhm").read_bytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(width=32, allow_nan=False)),
       hnp.arrays(np.int32, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)))
def test_gdhm_roundtrip_property(f, i):
    blob = encode({"f": f, "i": i})
    back = decode(blob)
    assert np.array_equal(back["f"], f) and back["f"].shape == f.shape
    assert np.array_equal(back["i"], i)
    assert encode(back) == blob


def _chunk_offsets(blob, names):
    """Byte offset at which each chunk record starts (after the table of contents)."""
    pos = 12 + sum(2 + len(n.encode()) for n in names)
    starts = []
    for _ in names:
        starts.append(pos)
        (length,) = struct.unpack_from("<H", blob, pos)
        pos += 2 + length
        tag, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        pos += int(np.prod(shape, dtype=np.int64)) * {1: 4, 2: 4, 3: 1}[tag]
    return starts


def test_truncation_names_missing_chunk(toy):
    chunks = model_chunks(toy)
    blob = encode(chunks)
    names = list(chunks)
    for name, start in zip(names, _chunk_offsets(blob, names)):
        with pytest.raises(GdhmFormatError, match=f"'{name}'"):
            decode(blob[:start])
        # cut inside the chunk as well
        with pytest.raises(GdhmFormatError, match=f"'{name}'"):
            decode(blob[:start + 3])


def test_malformed_headers():
    blob = encode(_chunks())
    with pytest.raises(GdhmFormatError, match="header"):
        decode(b"GDH")
    with pytest.raises(GdhmFormatError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(GdhmFormatError, match="version"):
        decode(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(GdhmFormatError, match="trailing"):
        decode(blob + b"\0")
    with pytest.raises(TypeError):
        encode({"c": np.zeros(2, dtype=np.complex64)})


def test_model_roundtrip(tmp_path, toy):
    save_model(toy, tmp_path / "m.gdhm")
    back = load_model(tmp_path / "m.gdhm")
    for k, arr in toy.arrays().items():
        assert np.array_equal(back.arrays()[k], arr.astype(np.float32).astype(arr.dtype)), k
    save_model(back, tmp_path / "m2.gdhm")
    assert (tmp_path / "m.gdhm").read_bytes() == (tmp_path / "m2.gdhm").read_bytes()


def test_model_file_errors(tmp_path, toy, caplog):
    chunks = model_chunks(toy)
    bad = dict(chunks)
    bad["skin_weights"] = bad["skin_weights"].copy()
    bad["skin_weights"][0] *= 0.5
    write_gdhm(tmp_path / "bad.gdhm", bad)
    with pytest.raises(ModelValidationError):
        load_model(tmp_path / "bad.gdhm")
    missing = {k: v for k, v in chunks.items() if k != "expr_basis"}
    write_gdhm(tmp_path / "missing.gdhm", missing)
    with pytest.raises(GdhmFormatError, match="expr_basis"):
        load_model(tmp_path / "missing.gdhm")
    write_gdhm(tmp_path / "extra.gdhm", {**chunks, "notes": np.zeros(1, np.float32)})
    with caplog.at_level(logging.WARNING):
        load_model(tmp_path / "extra.gdhm")
    assert "notes" in caplog.text


def test_ply_examples(tmp_path, toy):
    cloud = init_cloud(toy.template_vertices, toy.faces).subset(torch.tensor([7]))
    v = torch.as_tensor(toy.template_vertices)
    assert export_ply(tmp_path / "one.ply", cloud, v, toy.faces) == 1
    props, rec = read_ply(tmp_path / "one.ply")
    assert props == list(PROPERTIES) and len(props) == 14 and rec.shape == (1, 14)

    empty = cloud.subset(torch.zeros(0, dtype=torch.long))
    assert export_ply(tmp_path / "empty.ply", empty, v, toy.faces) == 0
    header = (tmp_path / "empty.ply").read_bytes()
    assert b"element vertex 0\n" in header and header.endswith(b"end_header\n")
    assert read_ply(tmp_path / "empty.ply")[1].shape == (0, 14)


def test_ply_roundtrip_values(tmp_path, toy):
    rng = np.random.default_rng(0)
    cloud = init_cloud(toy.template_vertices, toy.faces, per_triangle=2, seed=0)
    cloud.opacity_logit = torch.as_tensor(rng.normal(size=len(cloud)))
    cloud.color_logit = torch.as_tensor(rng.normal(size=(len(cloud), 3)))
    v = torch.as_tensor(toy.template_vertices)
    export_ply(tmp_path / "c.ply", cloud, v, toy.faces)
    _, rec = read_ply(tmp_path / "c.ply")
    world = promote_to_world(cloud, v, toy.faces)
    np.testing.assert_allclose(rec[:, :3], world.position.numpy(), atol=1e-6)
    np.testing.assert_allclose(1 / (1 + np.exp(-rec[:, 3])), world.opacity.numpy(), atol=1e-6)
    np.testing.assert_allclose(np.exp(rec[:, 4:7]), world.scale.numpy(), rtol=1e-5)
    np.testing.assert_allclose(0.5 + 0.28209479177387814 * rec[:, 11:14], world.color.numpy(), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normal_png_roundtrip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n = rng.uniform(-1, 1, size=(9, 7, 3))
    path = tmp_path_factory.mktemp("n") / "n.png"
    images.write_normal(path, n)
    assert np.abs(images.read_normal(path) - n).max() <= 1 / 65535
    # exact for already-quantized values
    q = images.decode_normal16(images.encode_normal16(n))
    images.write_normal(path, q)
    assert np.array_equal(images.read_normal(path), q)


def test_rgb_and_mask_png(tmp_path):
    rng = np.random.default_rng(1)
    rgb = rng.uniform(size=(5, 6, 3))
    images.write_rgb(tmp_path / "c.png", rgb)
    assert np.abs(images.read_rgb(tmp_path / "c.png") - rgb).max() <= 0.5 / 255 + 1e-12
    images.write_rgb(tmp_path / "red.png", np.tile([1.0, 0, 0], (2, 2, 1)))
    np.testing.assert_array_equal(images.read_rgb(tmp_path / "red.png")[0, 0], [1, 0, 0])
    m = rng.uniform(size=(5, 6)) > 0.5
    images.write_mask(tmp_path / "m.png", m.astype(float))
    np.testing.assert_array_equal(images.read_mask(tmp_path / "m.png"), m.astype(float))
    with pytest.raises(FileNotFoundError):
        images.read_rgb(tmp_path / "nope.png")
    assert images.resize_map(rgb, 10, 12).shape == (10, 12, 3)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.linspace(0, 1, 7), "n": np.arange(3), "it": np.array(5)}
    config = {"lr": 0.1, "name": "x", "nested": {"a": [1, 2]}}
    save_checkpoint(tmp_path / "c.gdhm", arrays, config)
    back, cfg = load_checkpoint(tmp_path / "c.gdhm")
    assert cfg == config
    assert back["w"].dtype == np.float32 and back["n"].dtype == np.int32 and back["it"].shape == ()
    np.testing.assert_array_equal(back["w"], arrays["w"].astype(np.float32))
    save_checkpoint(tmp_path / "d.gdhm", back, cfg)
    assert (tmp_path / "c.gdhm").read_bytes() == (tmp_path / "d.gdhm").read_bytes()
    assert config_hash(config) == config_hash({"nested": {"a": [1, 2]}, "name": "x", "lr": 0.1})


def test_checkpoint_hash_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.gdhm", {"w": np.zeros(2)}, {"a": 1})
    chunks = read_gdhm(tmp_path / "c.gdhm")
    chunks["__config__"] = np.frombuffer(b'{"a": 2}', dtype=np.uint8)
    write_gdhm(tmp_path / "c.gdhm", chunks)
    with pytest.raises(GdhmFormatError, match="hash"):
        load_checkpoint(tmp_path / "c.gdhm")
    write_gdhm(tmp_path / "plain.gdhm", {"w": np.zeros(2, np.float32)})
    with pytest.raises(GdhmFormatError, match="config"):
        load_checkpoint(tmp_path / "plain.gdhm")
