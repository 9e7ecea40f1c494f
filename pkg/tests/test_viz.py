import json

import numpy as np
import pytest

from advbn.data import generate_dataset
from advbn.models import build_mini_resnet, split
from advbn.viz import (
    Decoder,
    DecoderConfig,
    export_render,
    montage,
    read_ppm,
    reconstruct,
    render_perturbed,
    to_bytes,
    train_decoder,
    write_ppm,
)


def test_ppm_golden_white_pixel(tmp_path):
    write_ppm(np.ones((3, 1, 1)), tmp_path / "w.ppm")
    assert (tmp_path / "w.ppm").read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_golden_2x1(tmp_path):
    img = np.zeros((3, 1, 2))
    img[0, 0, 0] = 1.0  # red, then a grey at 0.5
    img[:, 0, 1] = 0.5
    write_ppm(img, tmp_path / "g.ppm")
    assert (tmp_path / "g.ppm").read_bytes() == b"P6\n2 1\n255\n\xff\x00\x00\x80\x80\x80"


def test_quantization_rounds_half_up_and_clips():
    px = to_bytes(np.array([-0.3, 0.5, 1.7]).reshape(3, 1, 1))
    assert px.tolist() == [[[0, 128, 255]]]
    with pytest.raises(ValueError):
        to_bytes(np.zeros((1, 2, 2)))


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.random((3, 5, 7))
    write_ppm(img, tmp_path / "r.ppm")
    back = read_ppm(tmp_path / "r.ppm")
    assert back.shape == (5, 7, 3)
    np.testing.assert_array_equal(back, to_bytes(img))


def test_read_rejects_garbage(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "y.ppm")


def test_montage_layout():
    a, b = np.zeros((3, 2, 2)), np.full((3, 2, 2), 0.5)
    m = montage([[a, b], [b, a]], gap=1)
    assert m.shape == (3, 5, 5)
    assert (m[:, 2, :] == 1).all() and (m[:, :, 2] == 1).all()
    assert (m[:, 3:, :2] == 0.5).all()


@pytest.fixture(scope="module")
def trained():
    train, test = generate_dataset(0, 4, 64, 8, 16)
    sm = split(build_mini_resnet(classes=4, width=4), "stage2_end")
    dec = train_decoder(sm, train, DecoderConfig(epochs=2, batch_size=16), test)
    return sm, dec, test


def test_decoder_shapes_and_scores(trained):
    sm, dec, test = trained
    assert reconstruct(sm, dec, test.images).shape == test.images.shape
    assert np.isfinite(dec.recon_loss) and dec.psnr > 0
    assert len(dec.history) == 2 * 4


def test_decoder_training_lowers_loss():
    train, _ = generate_dataset(1, 2, 32, 2, 16)
    sm = split(build_mini_resnet(classes=2, width=4), "stage3_end")
    untrained = train_decoder(sm, train, DecoderConfig(epochs=0))
    fitted = train_decoder(sm, train, DecoderConfig(epochs=4, batch_size=8, lr=5e-3))
    assert fitted.recon_loss < untrained.recon_loss


def test_decoder_deterministic(trained):
    sm, dec, test = trained
    again = train_decoder(sm, generate_dataset(0, 4, 64, 8, 16)[0], DecoderConfig(epochs=2, batch_size=16), test)
    assert [p.data.tobytes() for p in again.parameters()] == [p.data.tobytes() for p in dec.parameters()]


def test_zero_epsilon_is_reconstruction(trained):
    sm, dec, test = trained
    res = render_perturbed(test.images, test.labels, sm, dec, (0.0, 0.5, 1.1), batch_size=3)
    recon = np.clip(reconstruct(sm, dec, test.images), 0, 1)
    assert res.column(0).tobytes() == recon.astype(np.float64).tobytes()
    assert res.steps == [0, 3, 6]
    assert res.batches == [[0, 1, 2], [3, 4, 5], [6, 7]]
    assert not np.array_equal(res.column(2), res.column(0))


def test_fixed_steps_override(trained):
    sm, dec, test = trained
    res = render_perturbed(test.images[:2], test.labels[:2], sm, dec, (0.0, 1.5), steps=2)
    assert res.steps == [0, 2]


def test_export_files(tmp_path, trained):
    sm, dec, test = trained
    res = render_perturbed(test.images[:3], test.labels[:3], sm, dec, (0.0, 1.1), batch_size=2)
    index = export_render(res, tmp_path)
    assert len(index["images"]) == 6 and len(index["grids"]) == 2
    for entry in index["images"] + index["grids"]:
        assert read_ppm(tmp_path / entry["file"]).dtype == np.uint8
    assert json.loads((tmp_path / "render_index.json").read_text())["epsilons"] == [0.0, 1.1]
    grid = read_ppm(tmp_path / index["grids"][0]["file"])
    assert grid.shape == (2 * 16 + 1, 2 * 16 + 1, 3)
