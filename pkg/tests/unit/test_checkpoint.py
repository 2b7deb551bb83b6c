import os
import struct

import pytest
import torch

from uniroute.model.network import UniRouteModel
from uniroute.persistence.checkpoint import (
    CHECKSUM_SIZE,
    FORMAT_VERSION,
    BadMagicError,
    CheckpointFormatError,
    CheckpointStore,
    ChecksumMismatchError,
    FormatVersionError,
    TruncatedCheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from uniroute.training.freeze import FreezeGroup


@pytest.fixture
def store(tiny_model):
    return CheckpointStore.from_model(tiny_model, stage="1t2i", step=7)


@pytest.fixture
def encoded(store):
    return encode_checkpoint(store)


class TestEncoding:
    def test_header(self, encoded):
        assert encoded[:4] == b"OMMX"
        assert struct.unpack_from("<I", encoded, 4)[0] == FORMAT_VERSION

    def test_encoding_is_deterministic(self, store):
        assert encode_checkpoint(store) == encode_checkpoint(store)

    def test_decoded_store_matches(self, store, encoded):
        decoded = decode_checkpoint(encoded)

        assert decoded.config == store.config
        assert decoded.stage == "1t2i"
        assert decoded.step == 7
        assert decoded.groups == store.groups
        for name, tensor in store.tensors.items():
            assert torch.equal(decoded.tensors[name], tensor)

    def test_restored_model_is_identical(self, tiny_model, encoded):
        restored = decode_checkpoint(encoded).to_model()
        original = dict(tiny_model.named_parameters())

        for name, parameter in restored.named_parameters():
            assert torch.equal(parameter, original[name])

    def test_groups_cover_tensors(self, store):
        groups = dict(store.groups)
        groups.pop(next(iter(groups)))

        with pytest.raises(CheckpointFormatError):
            CheckpointStore(store.config, store.tensors, groups)

    def test_freeze_groups_are_recorded(self, store):
        assert FreezeGroup.MMU_LORA in set(store.groups.values())


class TestCorruption:
    def test_bad_magic(self, encoded):
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"XXXX" + encoded[4:])

    def test_unknown_version(self, encoded):
        data = encoded[:4] + struct.pack("<I", 99) + encoded[8:]

        with pytest.raises(FormatVersionError):
            decode_checkpoint(data)

    def test_truncated_payload(self, encoded):
        with pytest.raises(TruncatedCheckpointError):
            decode_checkpoint(encoded[:-100])

    def test_too_short_for_a_header(self):
        with pytest.raises(TruncatedCheckpointError):
            decode_checkpoint(b"OMMX")

    @pytest.mark.parametrize("where", [0.3, 0.6, 0.95])
    def test_flipped_payload_byte(self, encoded, where):
        data = bytearray(encoded)
        position = int((len(data) - CHECKSUM_SIZE) * where)
        data[position] ^= 0xFF

        with pytest.raises((ChecksumMismatchError, TruncatedCheckpointError)):
            decode_checkpoint(bytes(data))

    def test_flipped_metadata_byte_is_a_checksum_error(self, encoded):
        data = bytearray(encoded)
        data[20] ^= 0xFF

        with pytest.raises(ChecksumMismatchError):
            decode_checkpoint(bytes(data))

    def test_flipped_trailer_byte(self, encoded):
        data = bytearray(encoded)
        data[-1] ^= 0x01

        with pytest.raises(ChecksumMismatchError):
            decode_checkpoint(bytes(data))


class TestFiles:
    def test_save_and_load(self, store, tmp_path):
        path = str(tmp_path / "run" / "checkpoint.ommx")
        save_checkpoint(store, path)

        assert not os.path.exists(path + ".partial")
        assert load_checkpoint(path).step == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(str(tmp_path / "absent.ommx"))

    def test_mismatched_model_raises(self, store, tiny_config):
        other = UniRouteModel(tiny_config.with_lora_rank(0))

        with pytest.raises(CheckpointFormatError):
            store.load_into(other)
