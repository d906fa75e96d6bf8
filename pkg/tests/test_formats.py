import struct

import numpy as np
import pytest

from robustgen.formats import FormatError, load_idx, load_tensors, save_tensors, write_idx


def write_raw_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))


def test_idx_scaling(tmp_path):
    write_raw_idx(tmp_path / "img", 0x803, (1, 2, 2), [0, 255, 128, 64])
    write_raw_idx(tmp_path / "lab", 0x801, (1,), [7])
    x, y = load_idx(tmp_path / "img", tmp_path / "lab")
    assert x.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(x.ravel(), [0.0, 1.0, 128 / 255, 64 / 255])
    assert y.tolist() == [7]


def test_idx_wrong_magic_names_both(tmp_path):
    write_raw_idx(tmp_path / "img", 0x802, (1, 2), [1, 2])
    write_raw_idx(tmp_path / "lab", 0x801, (1,), [0])
    with pytest.raises(FormatError, match="0x00000802.*0x00000803"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    write_raw_idx(tmp_path / "img", 0x803, (2, 1, 1), [1, 2])
    write_raw_idx(tmp_path / "lab", 0x801, (3,), [0, 1, 2])
    with pytest.raises(ValueError, match="count"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_payload(tmp_path):
    write_raw_idx(tmp_path / "img", 0x803, (2, 2, 2), [1, 2, 3])
    write_raw_idx(tmp_path / "lab", 0x801, (2,), [0, 1])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


@pytest.mark.parametrize("shape", [(5, 4, 3), (4, 3, 2, 2)])
def test_idx_round_trip_is_byte_identical(tmp_path, rng, shape):
    pixels = rng.integers(0, 256, size=shape, dtype=np.uint8)
    labels = rng.integers(0, 10, size=shape[0], dtype=np.uint8)
    magic = 0x0800 | len(shape)
    write_raw_idx(tmp_path / "img", magic, shape, pixels.tobytes())
    write_raw_idx(tmp_path / "lab", 0x801, (shape[0],), labels.tobytes())
    x, y = load_idx(tmp_path / "img", tmp_path / "lab")
    write_idx(tmp_path / "img2", tmp_path / "lab2", x, y)
    assert (tmp_path / "img2").read_bytes() == (tmp_path / "img").read_bytes()
    assert (tmp_path / "lab2").read_bytes() == (tmp_path / "lab").read_bytes()


def test_rgw_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "stage1.conv.weight": rng.normal(size=(2, 3, 3, 3)),
        "scalar": np.array(np.pi),
        "empty": np.zeros((0, 4)),
        "ünïcode": np.array([np.nextafter(0, 1), -0.0, 1e308]),
    }
    save_tensors(tmp_path / "w.rgw", tensors)
    back = load_tensors(tmp_path / "w.rgw")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_rgw_layout(tmp_path):
    save_tensors(tmp_path / "w.rgw", {"ab": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "w.rgw").read_bytes()
    expected = b"RGW1" + struct.pack("<I", 2) + b"ab" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert raw == expected


def test_rgw_rejects_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "bad")
    save_tensors(tmp_path / "w.rgw", {"a": np.ones(4)})
    (tmp_path / "cut").write_bytes((tmp_path / "w.rgw").read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "cut")
