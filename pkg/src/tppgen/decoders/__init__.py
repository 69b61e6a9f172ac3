"""Next-interval decoders and sampling helpers."""

from __future__ import annotations

import numpy as np

from .base import Decoder, repeat_rows
from .cnf import FlowDecoder, flow_nll, rk4
from .deter import DeterministicDecoder
from .diffusion import DiffusionDecoder, DiffusionSchedule, forward_marginal, reverse_chain
from .gan import GANDecoder, critic_objectives
from .mixtures import FAMILIES, MixtureDecoder, mixture_nll
from .nsn import NoiseLadder, ScoreDecoder, annealed_langevin, score_matching_loss
from .vae import VAEDecoder, gaussian_kl

GENERATIVE = ("tcddm", "tcvae", "tcgan", "tccnf", "tcnsn")
DECODERS = GENERATIVE + FAMILIES + ("deter",)


def make_decoder(kind: str, params, dim: int, rng: np.random.Generator, **options) -> Decoder:
    if kind == "tcddm":
        return DiffusionDecoder(params, dim, rng, **options)
    if kind == "tcvae":
        return VAEDecoder(params, dim, rng, **options)
    if kind == "tcgan":
        return GANDecoder(params, dim, rng, **options)
    if kind == "tccnf":
        return FlowDecoder(params, dim, rng, **options)
    if kind == "tcnsn":
        return ScoreDecoder(params, dim, rng, **options)
    if kind in FAMILIES:
        return MixtureDecoder(params, dim, rng, family=kind, **options)
    if kind == "deter":
        return DeterministicDecoder(params, dim, rng, **options)
    raise ValueError(f"unknown decoder {kind!r}; choose from {', '.join(DECODERS)}")


__all__ = [
    "DECODERS", "GENERATIVE", "FAMILIES", "Decoder", "DiffusionDecoder", "DiffusionSchedule",
    "VAEDecoder", "GANDecoder", "FlowDecoder", "ScoreDecoder", "NoiseLadder", "MixtureDecoder",
    "DeterministicDecoder", "make_decoder", "forward_marginal", "reverse_chain", "rk4", "flow_nll",
    "annealed_langevin", "score_matching_loss", "critic_objectives", "mixture_nll", "gaussian_kl",
    "repeat_rows",
]
