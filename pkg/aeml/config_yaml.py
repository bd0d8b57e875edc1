from pathlib import Path
import pprint
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from loguru import logger

from aeml import ConfigError
from aeml.bayes_prior import BiLaplacianPrior
from aeml.consolidation import Consolidator, Scheme
from aeml.dias import DiasConfig
from aeml.mlp_codec import MlpArchitecture, TrainingConfig, load
from aeml.newton_cg import NewtonConfig, TStoreFactory
from aeml.quant_codec import ExternalCodec
from aeml.trajectory_store import StoreKind, TrajectoryStore, factory
from aeml.wave_core import (
    ForwardConfig,
    Grid,
    Medium,
    SourceSpec,
    TimeAxis,
    box_inclusion,
    cfl_dt,
)

TSection = Dict[str, Any]


class LabConfig:
    """Run configuration of one lab experiment, read from and written to YAML."""

    DEFAULT_FILE = "lab.yaml"

    DEFAULT_DIM = 2
    DEFAULT_CELLS = [32, 32]
    DEFAULT_SPACING = 1.0 / 32
    DEFAULT_TILE = [16, 16]

    DEFAULT_DENSITY = 1.0
    DEFAULT_BACKGROUND = 1.0

    DEFAULT_CFL_SAFETY = 0.5
    DEFAULT_FINAL_TIME = 2.0

    DEFAULT_PRIOR_ALPHA = BiLaplacianPrior.DEFAULT_ALPHA
    DEFAULT_PRIOR_THETA = BiLaplacianPrior.DEFAULT_THETA

    DEFAULT_NOISE_LEVEL = 0.01
    DEFAULT_SEED = 0

    DEFAULT_BACKEND = StoreKind.CHECKPOINT.value
    DEFAULT_SCHEME = Scheme.SPACE.value
    DEFAULT_WINDOW = 16
    DEFAULT_ETA = 1e-4
    DEFAULT_SPARSE_ENCODER = True
    DEFAULT_SPARSE_DECODER = True

    DEFAULT_LATENT = 16
    DEFAULT_ENCODER_WIDTHS = [128, 64, 32]
    DEFAULT_DECODER_WIDTHS = [32, 64, 128]
    DEFAULT_ACTIVATION = "elu"

    DEFAULT_SAMPLES = 10
    DEFAULT_KEEP_FRACTION = 0.1
    DEFAULT_DATA_DIR = "data"
    DEFAULT_WORKERS = 1

    DEFAULT_DIAS_SAMPLES = 30
    DEFAULT_DIAS_RANK = 5
    DEFAULT_DIAS_NAIVE = False

    BACKENDS = [
        StoreKind.FULL.value,
        StoreKind.CHECKPOINT.value,
        StoreKind.AUTOENCODER.value,
        StoreKind.QUANTIZER.value,
    ]

    def __init__(self, config_file: Optional[Path] = None) -> None:
        self.config_file = config_file
        self.project_dir: Optional[Path] = self.config_file.parent if self.config_file else None
        self.dim: int = self.DEFAULT_DIM
        self.cells: List[int] = list(self.DEFAULT_CELLS)
        self.spacing: float = self.DEFAULT_SPACING
        self.tile: List[int] = list(self.DEFAULT_TILE)
        self.density: float = self.DEFAULT_DENSITY
        self.background: float = self.DEFAULT_BACKGROUND
        self.inclusion: Optional[TSection] = None
        self.cfl_safety: float = self.DEFAULT_CFL_SAFETY
        self.dt: Optional[float] = None
        self.steps: Optional[int] = None
        self.final_time: float = self.DEFAULT_FINAL_TIME
        self.sources: List[TSection] = []
        self.receivers: List[List[float]] = []
        self.prior_alpha: float = self.DEFAULT_PRIOR_ALPHA
        self.prior_theta: float = self.DEFAULT_PRIOR_THETA
        self.prior_c_min: Optional[float] = None
        self.noise_level: float = self.DEFAULT_NOISE_LEVEL
        self.seed: int = self.DEFAULT_SEED
        self.backend: str = self.DEFAULT_BACKEND
        self.checkpoint_interval: Optional[int] = None
        self.scheme: str = self.DEFAULT_SCHEME
        self.window: int = self.DEFAULT_WINDOW
        self.eta: float = self.DEFAULT_ETA
        self.codec_file: Optional[str] = None
        self.codec_cmd: Optional[str] = None
        self.sparse_encoder: bool = self.DEFAULT_SPARSE_ENCODER
        self.sparse_decoder: bool = self.DEFAULT_SPARSE_DECODER
        self.latent: int = self.DEFAULT_LATENT
        self.encoder_widths: List[int] = list(self.DEFAULT_ENCODER_WIDTHS)
        self.decoder_widths: List[int] = list(self.DEFAULT_DECODER_WIDTHS)
        self.activation: str = self.DEFAULT_ACTIVATION
        self.training: TSection = {}
        self.datagen_samples: int = self.DEFAULT_SAMPLES
        self.keep_fraction: float = self.DEFAULT_KEEP_FRACTION
        self.data_dir: str = self.DEFAULT_DATA_DIR
        self.workers: int = self.DEFAULT_WORKERS
        self.newton: TSection = {}
        self.dias_samples: int = self.DEFAULT_DIAS_SAMPLES
        self.dias_rank: int = self.DEFAULT_DIAS_RANK
        self.dias_naive: bool = self.DEFAULT_DIAS_NAIVE

    def read_from_yaml(self, file: Optional[Path] = None) -> None:
        read_file = file or self.config_file
        if read_file is None or not Path(read_file).is_file():
            logger.error(f"Config file {read_file} not found.")
            raise ConfigError(f"Config file {read_file} not found.")
        with open(read_file) as stream:
            lab: Dict[str, Any] = yaml.safe_load(stream) or {}
        if not isinstance(lab, dict):
            raise ConfigError(f"Config file {read_file} does not hold a mapping.")

        grid = lab.get("grid", {})
        self.dim = int(grid.get("dim", self.DEFAULT_DIM))
        self.cells = list(grid.get("cells", self.DEFAULT_CELLS))
        self.spacing = float(grid.get("spacing", 1.0 / self.cells[0]))
        self.tile = list(grid.get("tile", self.DEFAULT_TILE))

        medium = lab.get("medium", {})
        self.density = float(medium.get("density", self.DEFAULT_DENSITY))
        self.background = float(medium.get("background", self.DEFAULT_BACKGROUND))
        self.inclusion = medium.get("inclusion")

        time = lab.get("time", {})
        self.cfl_safety = float(time.get("cfl-safety", self.DEFAULT_CFL_SAFETY))
        self.dt = time.get("dt")
        self.steps = time.get("steps")
        self.final_time = float(time.get("final-time", self.DEFAULT_FINAL_TIME))

        self.sources = list(lab.get("sources", []))
        self.receivers = self._read_receivers(lab.get("receivers", []))

        prior = lab.get("prior", {})
        self.prior_alpha = float(prior.get("alpha", self.DEFAULT_PRIOR_ALPHA))
        self.prior_theta = float(prior.get("theta", self.DEFAULT_PRIOR_THETA))
        self.prior_c_min = prior.get("c-min")

        inversion = lab.get("inversion", {})
        self.noise_level = float(inversion.get("noise-level", self.DEFAULT_NOISE_LEVEL))
        self.seed = int(inversion.get("seed", self.DEFAULT_SEED))

        store = lab.get("store", {})
        self.backend = str(store.get("backend", self.DEFAULT_BACKEND))
        self.checkpoint_interval = store.get("checkpoint-interval")
        self.scheme = str(store.get("scheme", self.DEFAULT_SCHEME))
        self.window = int(store.get("window", self.DEFAULT_WINDOW))
        self.eta = float(store.get("eta", self.DEFAULT_ETA))
        self.codec_file = store.get("codec-file")
        self.codec_cmd = store.get("codec-cmd")
        self.sparse_encoder = bool(store.get("sparse-encoder", self.DEFAULT_SPARSE_ENCODER))
        self.sparse_decoder = bool(store.get("sparse-decoder", self.DEFAULT_SPARSE_DECODER))

        codec = lab.get("codec", {})
        self.latent = int(codec.get("latent", self.DEFAULT_LATENT))
        self.encoder_widths = list(codec.get("encoder-widths", self.DEFAULT_ENCODER_WIDTHS))
        self.decoder_widths = list(codec.get("decoder-widths", self.DEFAULT_DECODER_WIDTHS))
        self.activation = str(codec.get("activation", self.DEFAULT_ACTIVATION))

        self.training = dict(lab.get("training", {}))

        datagen = lab.get("datagen", {})
        self.datagen_samples = int(datagen.get("samples", self.DEFAULT_SAMPLES))
        self.keep_fraction = float(datagen.get("keep-fraction", self.DEFAULT_KEEP_FRACTION))
        self.data_dir = str(datagen.get("data-dir", self.DEFAULT_DATA_DIR))
        self.workers = int(datagen.get("workers", self.DEFAULT_WORKERS))

        self.newton = dict(lab.get("newton", {}))

        dias = lab.get("dias", {})
        self.dias_samples = int(dias.get("samples", self.DEFAULT_DIAS_SAMPLES))
        self.dias_rank = int(dias.get("rank", self.DEFAULT_DIAS_RANK))
        self.dias_naive = bool(dias.get("naive", self.DEFAULT_DIAS_NAIVE))

        self.check()

    @staticmethod
    def _read_receivers(receivers: Any) -> List[List[float]]:
        if isinstance(receivers, dict):
            line = receivers.get("line")
            if line is None:
                return [list(map(float, r)) for r in receivers.get("locations", [])]
            start = np.asarray(line["start"], dtype=float)
            stop = np.asarray(line["stop"], dtype=float)
            count = int(line["count"])
            if count < 1:
                raise ConfigError(f"Receiver line needs at least one receiver, got {count}.")
            weights = np.linspace(0.0, 1.0, count) if count > 1 else np.zeros(1)
            return [list(start + w * (stop - start)) for w in weights]
        return [list(map(float, r)) for r in receivers]

    def check(self) -> None:
        if self.backend not in self.BACKENDS:
            logger.error(f"Store backend: {self.backend} not in {self.BACKENDS}.")
            raise ConfigError(f"Store backend: {self.backend} not in {self.BACKENDS}.")
        if self.scheme not in [s.value for s in Scheme]:
            raise ConfigError(f"Consolidation scheme {self.scheme!r} unknown.")
        if not self.sources:
            raise ConfigError("At least one source is required.")
        if not self.receivers:
            raise ConfigError("At least one receiver is required.")

    def to_dict(self) -> Dict[str, Any]:
        """Nested YAML mapping; keys holding their default value are left out."""

        def section(pairs: List[Tuple[str, Any, Any]]) -> TSection:
            return {key: value for key, value, default in pairs if value != default}

        lab: Dict[str, Any] = {
            "grid": section([
                ("dim", self.dim, self.DEFAULT_DIM),
                ("cells", self.cells, self.DEFAULT_CELLS),
                ("spacing", self.spacing, 1.0 / self.cells[0]),
                ("tile", self.tile, self.DEFAULT_TILE),
            ]),
            "medium": section([
                ("density", self.density, self.DEFAULT_DENSITY),
                ("background", self.background, self.DEFAULT_BACKGROUND),
                ("inclusion", self.inclusion, None),
            ]),
            "time": section([
                ("cfl-safety", self.cfl_safety, self.DEFAULT_CFL_SAFETY),
                ("dt", self.dt, None),
                ("steps", self.steps, None),
                ("final-time", self.final_time, self.DEFAULT_FINAL_TIME),
            ]),
            "sources": self.sources,
            "receivers": {"locations": self.receivers},
            "prior": section([
                ("alpha", self.prior_alpha, self.DEFAULT_PRIOR_ALPHA),
                ("theta", self.prior_theta, self.DEFAULT_PRIOR_THETA),
                ("c-min", self.prior_c_min, None),
            ]),
            "inversion": section([
                ("noise-level", self.noise_level, self.DEFAULT_NOISE_LEVEL),
                ("seed", self.seed, self.DEFAULT_SEED),
            ]),
            "store": section([
                ("backend", self.backend, self.DEFAULT_BACKEND),
                ("checkpoint-interval", self.checkpoint_interval, None),
                ("scheme", self.scheme, self.DEFAULT_SCHEME),
                ("window", self.window, self.DEFAULT_WINDOW),
                ("eta", self.eta, self.DEFAULT_ETA),
                ("codec-file", self.codec_file, None),
                ("codec-cmd", self.codec_cmd, None),
                ("sparse-encoder", self.sparse_encoder, self.DEFAULT_SPARSE_ENCODER),
                ("sparse-decoder", self.sparse_decoder, self.DEFAULT_SPARSE_DECODER),
            ]),
            "codec": section([
                ("latent", self.latent, self.DEFAULT_LATENT),
                ("encoder-widths", self.encoder_widths, self.DEFAULT_ENCODER_WIDTHS),
                ("decoder-widths", self.decoder_widths, self.DEFAULT_DECODER_WIDTHS),
                ("activation", self.activation, self.DEFAULT_ACTIVATION),
            ]),
            "training": self.training,
            "datagen": section([
                ("samples", self.datagen_samples, self.DEFAULT_SAMPLES),
                ("keep-fraction", self.keep_fraction, self.DEFAULT_KEEP_FRACTION),
                ("data-dir", self.data_dir, self.DEFAULT_DATA_DIR),
                ("workers", self.workers, self.DEFAULT_WORKERS),
            ]),
            "newton": self.newton,
            "dias": section([
                ("samples", self.dias_samples, self.DEFAULT_DIAS_SAMPLES),
                ("rank", self.dias_rank, self.DEFAULT_DIAS_RANK),
                ("naive", self.dias_naive, self.DEFAULT_DIAS_NAIVE),
            ]),
        }
        return {name: body for name, body in lab.items() if body}

    def save_to_yaml(self, file: Optional[Path] = None) -> None:
        path = file or self.config_file
        if path:
            with open(path, "w") as out:
                yaml.safe_dump(self.to_dict(), out, sort_keys=False)
        else:
            logger.error("No config file provided to save the lab configuration.")
            raise ConfigError("No config file provided to save the lab configuration.")

    def get_status(self) -> str:
        return pprint.pformat(self.to_dict(), indent=4)

    def resolve_path(self, value: str) -> Path:
        path = Path(value)
        if path.is_absolute() or self.project_dir is None:
            return path
        return self.project_dir.joinpath(path)

    def grid(self) -> Grid:
        return Grid(self.dim, tuple(self.cells), self.spacing, tuple(self.tile))

    def truth(self) -> np.ndarray:
        grid = self.grid()
        if self.inclusion is None:
            return box_inclusion(grid, self.background)
        return box_inclusion(
            grid,
            self.background,
            self.inclusion.get("lower"),
            self.inclusion.get("upper"),
            self.inclusion.get("speed"),
        )

    def density_field(self) -> np.ndarray:
        return np.full(self.grid().node_count, self.density)

    def time_axis(self) -> TimeAxis:
        grid = self.grid()
        if self.dt is not None:
            dt = float(self.dt)
        else:
            dt = cfl_dt(grid, Medium(self.density_field(), self.truth()), self.cfl_safety)
        steps = int(self.steps) if self.steps is not None else max(1, int(np.ceil(self.final_time / dt)))
        return TimeAxis(dt, steps)

    def source_specs(self) -> List[SourceSpec]:
        specs = []
        for source in self.sources:
            if "location" not in source:
                raise ConfigError(f"Source {source} has no location.")
            direction = source.get("direction")
            specs.append(
                SourceSpec(
                    location=tuple(source["location"]),
                    kind=source.get("kind", "ricker"),
                    t_c=float(source.get("t-c", 0.6)),
                    sigma_t=float(source.get("sigma-t", 1.0 / np.pi)),
                    sigma_x=float(source.get("sigma-x", 0.05)),
                    direction=tuple(direction) if direction is not None else None,
                )
            )
        return specs

    def forward_config(self) -> ForwardConfig:
        return ForwardConfig(
            grid=self.grid(),
            density=self.density_field(),
            time=self.time_axis(),
            sources=self.source_specs(),
            receivers=[tuple(r) for r in self.receivers],
        )

    def prior(self) -> BiLaplacianPrior:
        return BiLaplacianPrior(
            self.grid(), self.background, self.prior_alpha, self.prior_theta, self.prior_c_min
        )

    def consolidator(self) -> Consolidator:
        return Consolidator(self.grid(), Scheme(self.scheme), self.window)

    def architecture(self) -> MlpArchitecture:
        n_in = self.consolidator().n_in
        return MlpArchitecture(
            n_in,
            self.latent,
            tuple(self.encoder_widths),
            (*self.decoder_widths, n_in),
            self.activation,
        )

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**{key.replace("-", "_"): value for key, value in self.training.items()})

    def newton_config(self) -> NewtonConfig:
        options = {key.replace("-", "_"): value for key, value in self.newton.items()}
        options.setdefault("c_min", self.prior().c_min)
        return NewtonConfig(**options)

    def dias_config(self) -> DiasConfig:
        return DiasConfig(
            samples=self.dias_samples,
            rank=self.dias_rank,
            naive=self.dias_naive,
            workers=self.workers,
            seed=self.seed,
            newton=self.newton_config(),
        )

    def store_factory(self) -> TStoreFactory:
        """Fresh store per gradient evaluation; codecs are loaded once."""
        args: Dict[str, Any] = {
            "interval": self.checkpoint_interval,
            "scheme": Scheme(self.scheme),
            "window": self.window,
            "eta": self.eta,
        }
        if self.backend == StoreKind.AUTOENCODER.value:
            if not self.codec_file or not self.resolve_path(self.codec_file).is_file():
                logger.error(f"The ae store needs an existing codec file, got {self.codec_file}.")
                raise ConfigError(f"The ae store needs an existing codec file, got {self.codec_file}.")
            args["codec"] = load(
                self.resolve_path(self.codec_file), self.sparse_encoder, self.sparse_decoder
            )
        elif self.backend == StoreKind.QUANTIZER.value and self.codec_cmd:
            args["codec"] = ExternalCodec(self.codec_cmd, self.consolidator().n_in, self.eta)

        def make() -> TrajectoryStore:
            return factory.get(self.backend, **args)

        return make
