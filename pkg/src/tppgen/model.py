"""Encoder + interval decoder + mark head bundled with its normalisation stats."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value, no_grad
from .data import TAU_FLOOR, Batch, LogNormStats, log_denormalize, log_normalize
from .decoders import make_decoder
from .encoders import Encoder, EncoderConfig
from .errors import ConfigError, SchemaError
from .marks import MarkHead, cross_entropy


@dataclass
class ModelConfig:
    encoder: str = "revatt"
    decoder: str = "tcddm"
    dim: int = 16
    layers: int = 1
    num_marks: int = 1
    time_style: str = "positional"
    decoder_options: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


class TPPModel:
    def __init__(self, config: ModelConfig, stats: LogNormStats, seed: int = 0):
        self.config = config
        self.stats = stats
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        enc_cfg = EncoderConfig(config.encoder, config.dim, config.layers, config.num_marks,
                                config.time_style)
        self.encoder = Encoder(enc_cfg, self.params, rng)
        self.decoder = make_decoder(config.decoder, self.params, config.dim, rng,
                                    **config.decoder_options)
        self.marks = MarkHead(self.params, config.dim, config.num_marks, rng)

    # -- training ---------------------------------------------------------------
    def targets(self, tau) -> np.ndarray:
        if self.decoder.normalized:
            return log_normalize(tau, self.stats)
        return np.maximum(np.asarray(tau, dtype=np.float64), TAU_FLOOR)

    def _events(self, batch: Batch):
        H = self.encoder(batch)
        idx = np.nonzero(batch.mask)
        h = H[:, :-1][idx]
        return h, idx

    def loss(self, batch: Batch, rng: np.random.Generator) -> Value:
        """Time loss plus cross-entropy, summed over events and averaged over sequences."""
        h, idx = self._events(batch)
        target = self.targets(batch.tau[idx])
        per_event = self.decoder.loss(target, h, rng) + cross_entropy(self.marks.logits(h), batch.marks[idx])
        return per_event.sum() * (1.0 / batch.shape[0])

    def critic_loss(self, batch: Batch, rng: np.random.Generator) -> Value:
        with no_grad():
            h, idx = self._events(batch)
        target = self.targets(batch.tau[idx])
        return self.decoder.critic_loss(target, h.data, rng).sum() * (1.0 / batch.shape[0])

    @property
    def critic_names(self) -> list[str]:
        return self.decoder.critic_names if self.decoder.adversarial else []

    @property
    def generator_names(self) -> list[str]:
        skip = set(self.critic_names)
        return [n for n in self.params if n not in skip]

    # -- inference --------------------------------------------------------------
    def histories(self, batch: Batch) -> np.ndarray:
        """``(B, L + 1, D)`` history vectors, no graph."""
        with no_grad():
            return self.encoder(batch).data

    def to_intervals(self, raw: np.ndarray) -> np.ndarray:
        if self.decoder.normalized:
            return log_denormalize(raw, self.stats)
        return np.maximum(raw, TAU_FLOOR)

    def sample_intervals(self, h: np.ndarray, num_samples: int, rng: np.random.Generator,
                         record=None) -> np.ndarray:
        """``(N, S)`` positive interval draws for history rows ``h``."""
        return self.to_intervals(self.decoder.sample(h, num_samples, rng, record))

    def closed_form_mean(self, h: np.ndarray) -> np.ndarray | None:
        m = self.decoder.mean(h)
        return None if m is None else np.maximum(m, TAU_FLOOR)

    def mark_probs(self, h: np.ndarray) -> np.ndarray:
        return self.marks.probs(h)

    # -- persistence ------------------------------------------------------------
    def header(self) -> dict:
        return {"model": self.config.to_json(), "stats": self.stats.to_json(),
                "use_std": self.stats.use_std}

    def save(self, path, extra: dict | None = None) -> None:
        head = self.header()
        if extra:
            head.update(extra)
        ad.save_checkpoint(path, self.params, head)

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> tuple["TPPModel", dict]:
        header, flat = ad.read_checkpoint(path)
        cfg = ModelConfig.from_json(header["model"])
        if expect is not None and expect.to_json() != cfg.to_json():
            raise SchemaError("checkpoint was written for a different model configuration")
        s = header["stats"]
        stats = LogNormStats(s["mean_log"], s["var_log"], header.get("use_std", False))
        model = cls(cfg, stats)
        try:
            ad.load_into(model.params, header, flat)
        except Exception as exc:
            raise SchemaError(str(exc)) from exc
        return model, header
