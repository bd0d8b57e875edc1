import csv
import warnings

import numpy as np
import pytest
import scipy.linalg
import torch

from aeml import ConfigError, DataError, FormatError, ShapeError
from aeml.formats import dataset_record, write_dataset
from aeml.mlp_codec import (
    BETA,
    Lamb,
    MlpArchitecture,
    MlpCodec,
    TrainingConfig,
    denormalize,
    elu,
    load,
    normalize,
    normalize_batch,
    save,
    time_paths,
    train,
    train_on_array,
    write_history,
)

QUICK = TrainingConfig(epochs=2, batch_size=64, decay_every=1, finetune_epochs=1, sparsity=0.5)


def smooth_vectors(count: int, n_in: int = 16, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n_in)
    phases = rng.uniform(0, 2 * np.pi, (count, 1))
    return (0.5 + 0.5 * np.sin(2 * np.pi * x[None, :] + phases)).astype(np.float32)


def test_normalize_maps_into_unit_interval():
    y = np.array([-3.0, 1.0, 5.0])
    out, meta = normalize(y)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.allclose(denormalize(out, meta), y)


def test_normalize_constant_vector_uses_beta():
    out, meta = normalize(np.full(4, 2.0))
    assert meta.scale == BETA
    assert np.all(out == 0.0)
    with pytest.raises(DataError):
        normalize(np.array([1.0, np.nan]))


def test_normalize_batch_is_row_wise():
    vectors = np.array([[0.0, 2.0], [1.0, 1.0]])
    out, offsets, scales = normalize_batch(vectors)
    assert np.allclose(out[0], [0.0, 1.0])
    assert np.allclose(offsets, [0.0, 1.0])
    assert np.allclose(scales, [2.0, BETA])


def test_elu():
    assert elu(1.5) == 1.5
    assert elu(-1.0) == pytest.approx(np.exp(-1.0) - 1.0)
    assert np.allclose(elu(np.array([0.0, -2.0])), [0.0, np.expm1(-2.0)])


def test_architecture_shapes():
    desk = MlpArchitecture.desk()
    assert desk.encoder_sizes == [256, 128, 64, 32, 16]
    assert desk.decoder_sizes == [16, 32, 64, 128, 256]
    assert MlpArchitecture(8, 2).decoder_sizes == [2, 8]
    with pytest.raises(ConfigError):
        MlpArchitecture(8, 2, decoder_widths=(4,))
    with pytest.raises(ConfigError):
        MlpArchitecture(8, 2, activation="relu")


def test_encode_decode_shapes():
    codec = MlpCodec(MlpArchitecture(16, 4, (8,), (8, 16)))
    z = codec.encode(np.zeros((3, 16)))
    assert z.shape == (3, 4)
    assert codec.decode(z).shape == (3, 16)
    assert codec.encode(np.zeros(16)).shape == (4,)
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((3, 15)))


def test_pruning_keeps_sparse_and_dense_paths_equal():
    torch.manual_seed(0)
    codec = MlpCodec(MlpArchitecture(16, 4, (8,), (8, 16)))
    codec.prune(0.75)
    assert codec.sparsity("encoder") == pytest.approx(0.75)
    assert codec.sparsity("decoder") == pytest.approx(0.75)
    y = np.random.default_rng(0).random((5, 16))
    sparse = codec.encode(y)
    codec.sparse_encoder = False
    assert np.allclose(codec.encode(y), sparse, atol=1e-6)
    with pytest.raises(ConfigError):
        codec.prune(1.0)


def test_lamb_trust_ratio_is_clamped():
    weight = torch.nn.Parameter(torch.full((4,), 1e6))
    optimizer = Lamb([weight], lr=0.1)
    weight.grad = torch.ones(4)
    optimizer.step()
    # Adam update of norm 2, trust ratio clamped at 10
    assert torch.allclose(weight.detach(), torch.full((4,), 1e6 - 0.1 * 10.0))
    with pytest.raises(ValueError):
        Lamb([weight], lr=-1.0)


def test_training_schedule_and_pruning():
    data = smooth_vectors(512)
    codec = train_on_array(data, MlpArchitecture(16, 4, (12,), (12, 16)), QUICK)
    assert codec.trained
    phases = [row["phase"] for row in codec.history]
    assert phases == ["dense", "dense", "finetune"]
    assert codec.history[1]["lr"] == pytest.approx(0.5 * codec.history[0]["lr"])
    assert codec.sparsity("encoder") == pytest.approx(0.5)
    assert np.isfinite(codec.history[-1]["val_loss"])


def test_training_is_deterministic():
    data = smooth_vectors(256)
    arch = MlpArchitecture(16, 4)
    first = train_on_array(data, arch, QUICK)
    second = train_on_array(data, arch, QUICK)
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)


def test_training_rejects_bad_data():
    with pytest.raises(DataError):
        train_on_array(np.zeros((0, 16)), MlpArchitecture(16, 4))
    with pytest.raises(DataError):
        train_on_array(np.zeros((4, 8)), MlpArchitecture(16, 4))


def test_train_from_dataset_files(tmp_path):
    data = smooth_vectors(128)
    records = np.zeros(len(data), dtype=dataset_record(16))
    records["payload"] = data
    records["scale"] = 1.0
    write_dataset(tmp_path / "shard_0000.aetd", records, "space")
    codec = train([tmp_path / "shard_0000.aetd"], MlpArchitecture(16, 4), QUICK)
    write_history(codec, tmp_path / "training.csv")
    lines = (tmp_path / "training.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,lr,train_loss,val_loss"
    assert len(lines) == 1 + len(codec.history)
    with open(tmp_path / "training.csv", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["phase"] for row in rows] == ["dense", "dense", "finetune"]
    assert [float(row["lr"]) for row in rows] == [row["lr"] for row in codec.history]
    assert float(rows[-1]["train_loss"]) == codec.history[-1]["train_loss"]


def test_training_loss_is_read_without_autograd_warnings():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        train_on_array(smooth_vectors(128), MlpArchitecture(16, 4), QUICK)
    assert not [w for w in caught if "requires_grad" in str(w.message)]


def test_batch_and_single_vector_encoding_agree():
    codec = train_on_array(smooth_vectors(256), MlpArchitecture(16, 4, (8,), (8, 16)), QUICK)
    y = smooth_vectors(6, seed=2)
    batch = codec.encode(y)
    single = np.array([codec.encode(row) for row in y])
    assert np.allclose(single, batch, rtol=1e-5, atol=1e-6)
    decoded = codec.decode(batch)
    assert np.allclose(np.array([codec.decode(z) for z in batch]), decoded, rtol=1e-5, atol=1e-6)


def test_weights_survive_save_and_load(tmp_path):
    codec = train_on_array(smooth_vectors(256), MlpArchitecture(16, 4, (8,), (8, 16)), QUICK)
    save(codec, tmp_path / "codec.aemw")
    loaded = load(tmp_path / "codec.aemw")
    assert loaded.arch == codec.arch
    assert loaded.sparsity("encoder") == pytest.approx(codec.sparsity("encoder"))
    y = smooth_vectors(10, seed=1)
    assert np.array_equal(loaded.encode(y), codec.encode(y))
    assert np.array_equal(loaded.decode(codec.encode(y)), codec.decode(codec.encode(y)))


def test_weight_file_corruption(tmp_path):
    codec = MlpCodec(MlpArchitecture(8, 2))
    path = tmp_path / "codec.aemw"
    save(codec, path)
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(FormatError):
        load(path)
    path.write_bytes(b"ZZZZ" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load(path)


def test_time_paths_reports_both_layouts():
    codec = MlpCodec(MlpArchitecture(16, 4))
    codec.prune(0.5)
    timings = time_paths(codec, np.random.default_rng(0).random((32, 16)), repeats=2)
    assert set(timings) == {"encode_dense", "decode_dense", "encode_sparse", "decode_sparse"}
    assert codec.sparse_encoder and codec.sparse_decoder


@pytest.mark.slow
def test_linear_autoencoder_recovers_the_principal_subspace():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((32, 8)))[0]
    data = (rng.standard_normal((4096, 8)) * np.linspace(3.0, 1.0, 8)) @ basis.T
    hp = TrainingConfig(epochs=200, batch_size=256, lr=1e-2, decay_every=50, prune=False, validation_fraction=0.0)
    codec = train_on_array(data, MlpArchitecture(32, 8, activation="identity"), hp)
    decoder = codec.decoder[0].weight.detach().numpy().astype(float)
    angles = scipy.linalg.subspace_angles(decoder, basis)
    assert angles.max() < 1e-2


def wave_like_vectors(count: int, n_in: int = 256, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n_in)[None, :]
    frequency = rng.uniform(1.0, 2.0, (count, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, (count, 1))
    center = rng.uniform(0.3, 0.7, (count, 1))
    packet = np.exp(-((x - center) ** 2) / 0.08) * np.sin(2.0 * np.pi * frequency * x + phase)
    return normalize_batch(packet)[0].astype(np.float32)


@pytest.mark.slow
def test_desk_codec_reconstructs_held_out_vectors():
    hp = TrainingConfig(epochs=40, batch_size=128, decay_every=15, finetune_epochs=10)
    codec = train_on_array(wave_like_vectors(8192), MlpArchitecture.desk(), hp)
    held_out = wave_like_vectors(1024, seed=1)
    reconstructed = codec.decode(codec.encode(held_out))
    errors = np.linalg.norm(reconstructed - held_out, axis=1) / np.linalg.norm(held_out, axis=1)
    assert np.median(errors) < 0.05
