"""Named-array archive format: round trips and malformed-input rejection."""

import numpy as np
import numpy.testing as npt
import pytest

from pointdrape.engine.archive import ArchiveError, read_archive, write_archive


@pytest.fixture
def sample():
    rng = np.random.default_rng(3)
    return {
        "enc/conv0/kernel": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "enc/conv0/bias": np.zeros(4, dtype=np.float32),
        "G/outfit_a": rng.standard_normal((2, 4, 4)).astype(np.float32),
        "scalar": np.float32(1.5).reshape(()),
    }


def test_round_trip_values_and_order(tmp_path, sample):
    path = tmp_path / "m.tarc"
    write_archive(path, sample)
    back = read_archive(path)
    assert list(back) == list(sample)
    for k in sample:
        assert back[k].dtype == np.float32
        npt.assert_array_equal(back[k], sample[k])
        assert back[k].shape == sample[k].shape


def test_write_is_byte_deterministic(tmp_path, sample):
    p1, p2 = tmp_path / "a.tarc", tmp_path / "b.tarc"
    write_archive(p1, sample)
    write_archive(p2, sample)
    assert p1.read_bytes() == p2.read_bytes()


def test_float64_input_stored_as_f32(tmp_path):
    path = tmp_path / "m.tarc"
    write_archive(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    assert read_archive(path)["x"].dtype == np.float32


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.tarc"
    path.write_bytes(b"NOPE\n0\n")
    with pytest.raises(ArchiveError, match="magic"):
        read_archive(path)


def test_truncated_payload_rejected(tmp_path, sample):
    path = tmp_path / "m.tarc"
    write_archive(path, sample)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(ArchiveError):
        read_archive(path)


def test_trailing_garbage_rejected(tmp_path, sample):
    path = tmp_path / "m.tarc"
    write_archive(path, sample)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(ArchiveError):
        read_archive(path)


def test_duplicate_name_rejected(tmp_path):
    path = tmp_path / "m.tarc"
    payload = np.zeros(1, dtype="<f4").tobytes()
    body = b"TARC\n2\nx f32 1\nx f32 1\n" + payload + payload
    path.write_bytes(body)
    with pytest.raises(ArchiveError, match="duplicate"):
        read_archive(path)


def test_bad_entry_line_reports_line_number(tmp_path):
    path = tmp_path / "m.tarc"
    path.write_bytes(b"TARC\n1\nx f64 1\n" + b"\x00" * 4)
    with pytest.raises(ArchiveError, match="line 3"):
        read_archive(path)


def test_invalid_name_rejected_on_write(tmp_path):
    with pytest.raises(ArchiveError):
        write_archive(tmp_path / "m.tarc", {"bad name": np.zeros(1, np.float32)})


def test_empty_archive_round_trip(tmp_path):
    path = tmp_path / "m.tarc"
    write_archive(path, {})
    assert read_archive(path) == {}
