import struct
from collections import OrderedDict

import numpy as np
import pytest

from hpmlab.checkpoint import (
    Checkpoint,
    CheckpointError,
    ChecksumError,
    VersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)


def sample(rng):
    def group(dtype):
        return OrderedDict([("a.weight", rng.standard_normal((3, 4)).astype(dtype)),
                            ("a.bias", rng.standard_normal(4).astype(dtype)),
                            ("scalar", np.array(1.5, dtype=dtype))])

    return Checkpoint("gamma = 0.75\n", group(np.float32), group(np.float32), group(np.float64),
                      group(np.float64), {"epoch": 3, "rng": {"x": [1, 2]}})


def test_roundtrip(tmp_path, rng):
    ck = sample(rng)
    save_checkpoint(tmp_path / "c.hpmk", ck)
    back = load_checkpoint(tmp_path / "c.hpmk")
    assert back.config_text == ck.config_text and back.meta == ck.meta and back.epoch == 3
    for g in ("student", "teacher", "adam_m", "adam_v"):
        for k, v in getattr(ck, g).items():
            w = getattr(back, g)[k]
            assert w.dtype == v.dtype and w.shape == v.shape and w.tobytes() == v.tobytes()


def test_save_load_save_is_byte_identical(tmp_path, rng):
    save_checkpoint(tmp_path / "a.hpmk", sample(rng))
    save_checkpoint(tmp_path / "b.hpmk", load_checkpoint(tmp_path / "a.hpmk"))
    assert (tmp_path / "a.hpmk").read_bytes() == (tmp_path / "b.hpmk").read_bytes()


def test_layout_header(rng):
    raw = to_bytes(sample(rng))
    assert raw[:4] == b"HPMK" and struct.unpack_from("<I", raw, 4) == (1,)


def test_truncated_file_fails_checksum(rng):
    raw = to_bytes(sample(rng))
    with pytest.raises(ChecksumError):
        from_bytes(raw[:-7] + raw[-4:])
    with pytest.raises(ChecksumError):
        from_bytes(raw[:-1])


def test_flipped_byte_fails_checksum(rng):
    raw = bytearray(to_bytes(sample(rng)))
    raw[40] ^= 0x01
    with pytest.raises(ChecksumError):
        from_bytes(bytes(raw))


def test_version_mismatch(rng):
    ck = sample(rng)
    ck.version = 2
    with pytest.raises(VersionError, match="version 2"):
        from_bytes(to_bytes(ck))


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError):
        from_bytes(b"HPMC" + bytes(20))


def test_unsupported_dtype_rejected(rng):
    ck = sample(rng)
    ck.student["ints"] = np.arange(3)
    with pytest.raises(CheckpointError):
        to_bytes(ck)
