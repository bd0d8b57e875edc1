"""Dense autoencoder codec with ELU hidden layers and optional sparse edge layers.

The first encoder layer and the last decoder layer can be magnitude pruned; once
pruned each may run through a sparse matmul (`sparse_encoder`, `sparse_decoder`)
or through the dense masked weight.
"""
import csv
from dataclasses import dataclass
import math
from pathlib import Path
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn
from torch.optim.lr_scheduler import StepLR
from torch.optim.optimizer import Optimizer

from aeml import ConfigError, DataError, FormatError, ShapeError
from aeml.formats import (
    FORMAT_VERSION,
    WEIGHTS_HEADER,
    WEIGHTS_MAGIC,
    TPath,
    pack_header,
    read_dataset,
    take,
    unpack_header,
)

BETA = 1e-7
ACTIVATIONS = {"identity": 0, "elu": 1}
HISTORY_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_loss")
STORAGE_DENSE, STORAGE_CSR = 0, 1


@dataclass(frozen=True)
class NormalizationMeta:
    offset: float
    scale: float


def normalize(y_true: np.ndarray) -> Tuple[np.ndarray, NormalizationMeta]:
    y_true = np.asarray(y_true, dtype=float)
    if np.isnan(y_true).any():
        logger.error("NaN in vector handed to normalize.")
        raise DataError("NaN in vector handed to normalize.")
    if y_true.size == 0:
        return y_true.copy(), NormalizationMeta(0.0, BETA)
    offset = float(y_true.min())
    scale = max(float(y_true.max()) - offset, BETA)
    return (y_true - offset) / scale, NormalizationMeta(offset, scale)


def normalize_batch(vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise normalize; returns (normalized rows, offsets, scales)."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if np.isnan(vectors).any():
        logger.error("NaN in vectors handed to normalize.")
        raise DataError("NaN in vectors handed to normalize.")
    offsets = vectors.min(axis=1)
    scales = np.maximum(vectors.max(axis=1) - offsets, BETA)
    return (vectors - offsets[:, None]) / scales[:, None], offsets, scales


def denormalize(y: np.ndarray, meta: NormalizationMeta) -> np.ndarray:
    return np.asarray(y, dtype=float) * meta.scale + meta.offset


def elu(x):
    x = np.asarray(x, dtype=float)
    out = np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    latent_dim: int
    encoder_widths: Tuple[int, ...] = ()
    decoder_widths: Tuple[int, ...] = ()
    activation: str = "elu"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigError("Input and latent dimensions must be positive.")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation {self.activation!r}.")
        decoder = tuple(self.decoder_widths) or (self.input_dim,)
        if decoder[-1] != self.input_dim:
            raise ConfigError(
                f"Decoder must end at the input width {self.input_dim}, got {decoder[-1]}."
            )

    @property
    def encoder_sizes(self) -> List[int]:
        return [self.input_dim, *self.encoder_widths, self.latent_dim]

    @property
    def decoder_sizes(self) -> List[int]:
        return [self.latent_dim, *(tuple(self.decoder_widths) or (self.input_dim,))]

    @classmethod
    def desk(cls) -> "MlpArchitecture":
        return cls(256, 16, (128, 64, 32), (32, 64, 128, 256))

    @classmethod
    def reference(cls) -> "MlpArchitecture":
        return cls(
            4096,
            64,
            (512, 256, 256, 256, 128, 64, 64),
            (128, 128, 256, 256, 256, 512, 4096),
        )


class MlpCodec(nn.Module):
    def __init__(
        self,
        arch: MlpArchitecture,
        sparse_encoder: bool = True,
        sparse_decoder: bool = True,
    ) -> None:
        super().__init__()
        self.arch = arch
        enc, dec = arch.encoder_sizes, arch.decoder_sizes
        self.encoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(enc[:-1], enc[1:]))
        self.decoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dec[:-1], dec[1:]))
        self.sparse_encoder = sparse_encoder
        self.sparse_decoder = sparse_decoder
        self.masks: Dict[str, torch.Tensor] = {}
        self._sparse: Dict[str, torch.Tensor] = {}
        self.trained = False
        self.history: List[Dict[str, float]] = []

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def _edge_layers(self) -> Dict[str, nn.Linear]:
        return {"encoder": self.encoder[0], "decoder": self.decoder[-1]}

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return F.elu(x) if self.arch.activation == "elu" else x

    def _run(self, x: torch.Tensor, layers: nn.ModuleList, edge: str, sparse: bool) -> torch.Tensor:
        last = len(layers) - 1
        edge_index = 0 if edge == "encoder" else last
        for i, layer in enumerate(layers):
            if sparse and i == edge_index and edge in self._sparse:
                x = torch.sparse.mm(self._sparse[edge], x.T).T + layer.bias
            else:
                x = layer(x)
            if i < last:
                x = self._act(x)
        return x

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self._run(self._run(y, self.encoder, "encoder", False), self.decoder, "decoder", False)

    def _as_batch(self, values: np.ndarray, width: int) -> Tuple[torch.Tensor, bool]:
        values = np.asarray(values)
        single = values.ndim == 1
        batch = np.atleast_2d(values)
        if batch.ndim != 2 or batch.shape[1] != width:
            logger.error(f"Codec input has shape {values.shape}, expected (..., {width}).")
            raise ShapeError(f"Codec input has shape {values.shape}, expected (..., {width}).")
        return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)), single

    def encode(self, y: np.ndarray) -> np.ndarray:
        x, single = self._as_batch(y, self.input_dim)
        with torch.no_grad():
            z = self._run(x, self.encoder, "encoder", self.sparse_encoder).numpy()
        return z[0] if single else z

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z, single = self._as_batch(latent, self.latent_dim)
        with torch.no_grad():
            y = self._run(z, self.decoder, "decoder", self.sparse_decoder).numpy()
        return y[0] if single else y

    def prune(self, sparsity: float) -> None:
        """One-shot magnitude pruning of the two edge layers."""
        if not 0.0 <= sparsity < 1.0:
            raise ConfigError(f"Sparsity must lie in [0, 1), got {sparsity}.")
        for name, layer in self._edge_layers().items():
            weight = layer.weight.detach()
            drop = int(round(sparsity * weight.numel()))
            order = np.argsort(np.abs(weight.numpy()).ravel(), kind="stable")
            mask = np.ones(weight.numel(), dtype=np.float32)
            mask[order[:drop]] = 0.0
            self.masks[name] = torch.from_numpy(mask.reshape(tuple(weight.shape)))
        self.apply_masks()
        self.refresh_sparse()

    def apply_masks(self) -> None:
        with torch.no_grad():
            for name, layer in self._edge_layers().items():
                if name in self.masks:
                    layer.weight.mul_(self.masks[name])

    def refresh_sparse(self) -> None:
        self._sparse = {
            name: (layer.weight.detach() * self.masks[name]).to_sparse()
            for name, layer in self._edge_layers().items()
            if name in self.masks
        }

    def sparsity(self, name: str) -> float:
        if name not in self.masks:
            return 0.0
        return 1.0 - float(self.masks[name].mean())


class Lamb(Optimizer):
    """Adam moments with a layerwise trust ratio ||w|| / ||update||."""

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clamp: Tuple[float, float] = (1e-3, 10.0),
    ) -> None:
        if not lr >= 0.0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"Invalid betas: {betas}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, clamp=clamp)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            low, high = group["clamp"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                m, v = state["m"], state["v"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                m_hat = m / (1 - beta1 ** state["step"])
                v_hat = v / (1 - beta2 ** state["step"])
                update = m_hat / (v_hat.sqrt() + group["eps"])
                if group["weight_decay"]:
                    update = update + group["weight_decay"] * p
                w_norm = float(torch.linalg.vector_norm(p))
                u_norm = float(torch.linalg.vector_norm(update))
                ratio = 1.0 if w_norm == 0.0 or u_norm == 0.0 else min(max(w_norm / u_norm, low), high)
                p.add_(update, alpha=-group["lr"] * ratio)
        return loss


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 512
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 5
    validation_fraction: float = 0.1
    prune: bool = True
    sparsity: float = 0.95
    finetune_epochs: int = 5
    seed: int = 0
    deterministic: bool = True


def _set_deterministic(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def _mse(codec: MlpCodec, data: torch.Tensor) -> float:
    if len(data) == 0:
        return math.nan
    with torch.no_grad():
        return float(F.mse_loss(codec(data), data))


def _run_epochs(
    codec: MlpCodec,
    train_set: torch.Tensor,
    val_set: torch.Tensor,
    optimizer: Optimizer,
    epochs: int,
    batch_size: int,
    generator: torch.Generator,
    phase: str,
    scheduler: Optional[StepLR] = None,
) -> None:
    for _ in range(epochs):
        lr = optimizer.param_groups[0]["lr"]
        total = 0.0
        for batch_ids in torch.randperm(len(train_set), generator=generator).split(batch_size):
            batch = train_set[batch_ids]
            optimizer.zero_grad()
            loss = F.mse_loss(codec(batch), batch)
            loss.backward()
            optimizer.step()
            if codec.masks:
                codec.apply_masks()
            total += loss.item() * len(batch)
        row = {
            "epoch": len(codec.history) + 1,
            "phase": phase,
            "lr": lr,
            "train_loss": total / len(train_set),
            "val_loss": _mse(codec, val_set),
        }
        codec.history.append(row)
        logger.info(
            f"{phase} epoch {row['epoch']}: lr={lr:.3g} train={row['train_loss']:.4e} "
            f"val={row['val_loss']:.4e}"
        )
        if scheduler is not None:
            scheduler.step()


def train_on_array(
    data: np.ndarray, arch: MlpArchitecture, hparams: Optional[TrainingConfig] = None
) -> MlpCodec:
    hp = hparams or TrainingConfig()
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or len(data) == 0:
        logger.error("Training needs a non-empty dataset.")
        raise DataError("Training needs a non-empty dataset.")
    if data.shape[1] != arch.input_dim:
        logger.error(f"Record length {data.shape[1]} does not match N_in={arch.input_dim}.")
        raise DataError(f"Record length {data.shape[1]} does not match N_in={arch.input_dim}.")

    _set_deterministic(hp.seed, hp.deterministic)
    order = np.random.default_rng(hp.seed).permutation(len(data))
    n_val = int(round(hp.validation_fraction * len(data))) if len(data) > 1 else 0
    val_set = torch.from_numpy(data[order[:n_val]])
    train_set = torch.from_numpy(data[order[n_val:]])
    generator = torch.Generator().manual_seed(hp.seed)

    codec = MlpCodec(arch)
    optimizer = Lamb(codec.parameters(), lr=hp.lr)
    scheduler = StepLR(optimizer, step_size=hp.decay_every, gamma=hp.lr_decay)
    _run_epochs(codec, train_set, val_set, optimizer, hp.epochs, hp.batch_size, generator, "dense", scheduler)

    if hp.prune:
        final_lr = codec.history[-1]["lr"] if codec.history else hp.lr
        codec.prune(hp.sparsity)
        finetune = Lamb(codec.parameters(), lr=final_lr)
        _run_epochs(codec, train_set, val_set, finetune, hp.finetune_epochs, hp.batch_size, generator, "finetune")
    codec.trained = True
    codec.eval()
    codec.refresh_sparse()
    return codec


def train(
    dataset_files: Sequence[TPath],
    arch: MlpArchitecture,
    hparams: Optional[TrainingConfig] = None,
) -> MlpCodec:
    dataset = read_dataset(dataset_files)
    logger.info(f"Training on {len(dataset)} records of length {dataset.n_in}.")
    return train_on_array(dataset.payload, arch, hparams)


def write_history(codec: MlpCodec, path: TPath) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(HISTORY_FIELDS)
        for row in codec.history:
            writer.writerow([row[name] for name in HISTORY_FIELDS])


def save(codec: MlpCodec, path: TPath) -> None:
    layers = list(codec.encoder) + list(codec.decoder)
    masked = {id(codec.encoder[0]): "encoder", id(codec.decoder[-1]): "decoder"}
    chunks = [
        pack_header(
            WEIGHTS_HEADER,
            magic=WEIGHTS_MAGIC,
            version=FORMAT_VERSION,
            layers=len(layers),
            encoder_layers=len(codec.encoder),
            activation=ACTIVATIONS[codec.arch.activation],
        )
    ]
    for layer in layers:
        weight = layer.weight.detach().numpy().astype("<f4")
        rows, cols = weight.shape
        name = masked.get(id(layer))
        csr = name is not None and name in codec.masks
        chunks.append(np.array([rows, cols], dtype="<u4").tobytes())
        chunks.append(np.array([STORAGE_CSR if csr else STORAGE_DENSE], dtype="u1").tobytes())
        if csr:
            mask = codec.masks[name].numpy() > 0
            r, c = np.nonzero(mask)
            indptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))])
            chunks.append(np.array([len(r)], dtype="<u4").tobytes())
            chunks.append(indptr.astype("<u4").tobytes())
            chunks.append(c.astype("<u4").tobytes())
            chunks.append(weight[r, c].astype("<f4").tobytes())
        else:
            chunks.append(weight.tobytes())
        chunks.append(layer.bias.detach().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: TPath, sparse_encoder: bool = True, sparse_decoder: bool = True) -> MlpCodec:
    buffer = Path(path).read_bytes()
    header, offset = unpack_header(buffer, WEIGHTS_HEADER, WEIGHTS_MAGIC)
    activation = {code: name for name, code in ACTIVATIONS.items()}.get(int(header["activation"]))
    n_layers, n_enc = int(header["layers"]), int(header["encoder_layers"])
    if activation is None or not 1 <= n_enc < n_layers:
        raise FormatError(f"Corrupt weight header in {path}.")

    records = []
    for _ in range(n_layers):
        shape, offset = take(buffer, "<u4", 2, offset)
        rows, cols = int(shape[0]), int(shape[1])
        storage, offset = take(buffer, "u1", 1, offset)
        mask = None
        if int(storage[0]) == STORAGE_DENSE:
            weight, offset = take(buffer, "<f4", rows * cols, offset)
            weight = weight.reshape(rows, cols)
        elif int(storage[0]) == STORAGE_CSR:
            nnz, offset = take(buffer, "<u4", 1, offset)
            indptr, offset = take(buffer, "<u4", rows + 1, offset)
            indices, offset = take(buffer, "<u4", int(nnz[0]), offset)
            values, offset = take(buffer, "<f4", int(nnz[0]), offset)
            if indptr[-1] != nnz[0] or (len(indices) and indices.max() >= cols):
                raise FormatError(f"Corrupt sparse layer in {path}.")
            row_ids = np.repeat(np.arange(rows), np.diff(indptr.astype(np.int64)))
            weight = np.zeros((rows, cols), dtype=np.float32)
            weight[row_ids, indices] = values
            mask = np.zeros((rows, cols), dtype=np.float32)
            mask[row_ids, indices] = 1.0
        else:
            raise FormatError(f"Unknown layer storage {int(storage[0])} in {path}.")
        bias, offset = take(buffer, "<f4", rows, offset)
        records.append((weight, bias, mask))
    if offset != len(buffer):
        raise FormatError(f"Trailing bytes in weight file {path}.")

    enc, dec = records[:n_enc], records[n_enc:]
    arch = MlpArchitecture(
        input_dim=enc[0][0].shape[1],
        latent_dim=enc[-1][0].shape[0],
        encoder_widths=tuple(w.shape[0] for w, _, _ in enc[:-1]),
        decoder_widths=tuple(w.shape[0] for w, _, _ in dec),
        activation=activation,
    )
    codec = MlpCodec(arch, sparse_encoder, sparse_decoder)
    with torch.no_grad():
        for layer, (weight, bias, _) in zip(list(codec.encoder) + list(codec.decoder), records):
            if tuple(layer.weight.shape) != weight.shape:
                raise FormatError(f"Layer shapes in {path} do not chain.")
            layer.weight.copy_(torch.from_numpy(weight))
            layer.bias.copy_(torch.from_numpy(bias))
    for name, (_, _, mask) in (("encoder", enc[0]), ("decoder", dec[-1])):
        if mask is not None:
            codec.masks[name] = torch.from_numpy(mask)
    codec.refresh_sparse()
    codec.trained = True
    codec.eval()
    return codec


def time_paths(codec: MlpCodec, vectors: np.ndarray, repeats: int = 5) -> Dict[str, float]:
    """Best-of-`repeats` encode and decode seconds for the dense and the sparse edge layers."""
    flags = (codec.sparse_encoder, codec.sparse_decoder)
    timings: Dict[str, float] = {}
    latent = codec.encode(vectors)
    try:
        for label, sparse in (("dense", False), ("sparse", True)):
            codec.sparse_encoder = codec.sparse_decoder = sparse
            for op, data in (("encode", vectors), ("decode", latent)):
                best = math.inf
                for _ in range(repeats):
                    start = time.perf_counter()
                    getattr(codec, op)(data)
                    best = min(best, time.perf_counter() - start)
                timings[f"{op}_{label}"] = best
    finally:
        codec.sparse_encoder, codec.sparse_decoder = flags
    return timings
