"""Latent-diffusion production adapter (diffusers Stable Diffusion weights).

Weights are loaded lazily and shared between the denoiser and the VAE codec.
The unconditional embedding is the empty-prompt text embedding, flattened.
Self-attention probabilities are captured by a custom attention processor on
every ``attn1`` module; sites are named by their module path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import torch

from src.backends.base import AttentionKey, AttentionSite, DenoiserBackend, LatentCodec, UncondEmbedding
from src.config import DEVICE, LDM_MODEL
from src.exceptions import ConfigError

try:
    from diffusers import StableDiffusionPipeline
except Exception:  # pragma: no cover
    StableDiffusionPipeline = None

logger = logging.getLogger(__name__)

VAE_SCALE = 0.18215


@lru_cache(maxsize=2)
def load_pipeline(model_id: str, device: str):  # pragma: no cover - needs weights
    if StableDiffusionPipeline is None:
        raise ConfigError("ldm-adapter needs the optional 'diffusers' and 'transformers' packages")
    logger.info("Loading latent diffusion weights %s on %s", model_id, device)
    pipe = StableDiffusionPipeline.from_pretrained(model_id, safety_checker=None)
    pipe = pipe.to(device)
    for module in (pipe.unet, pipe.vae, pipe.text_encoder):
        module.requires_grad_(False)
        module.eval()
    return pipe


class SelfAttentionRecorder:
    """Attention processor that keeps self-attention probabilities per site."""

    def __init__(self, site: str, store: dict[str, torch.Tensor]):
        self.site = site
        self.store = store

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        is_self = encoder_hidden_states is None
        context = hidden_states if is_self else encoder_hidden_states
        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)
        if is_self:
            self.store[self.site] = probs
        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        out = attn.to_out[0](out)
        return attn.to_out[1](out)


@dataclass
class LDMAdapter(DenoiserBackend):  # pragma: no cover - needs weights
    model_id: str = LDM_MODEL
    device: str = DEVICE
    resolution: int = 512
    _store: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    backend_id = "ldm-adapter"

    def __post_init__(self):
        self.pipe = load_pipeline(self.model_id, self.device)
        processors = {}
        self._sites: list[AttentionSite] = []
        latent_side = self.resolution // 8
        for name in self.pipe.unet.attn_processors:
            if name.endswith("attn1.processor"):
                site = name.removesuffix(".processor")
                processors[name] = SelfAttentionRecorder(site, self._store)
                heads = self._module(site).heads
                self._sites.append(AttentionSite(site, heads, self._tokens_at(site, latent_side)))
            else:
                processors[name] = self.pipe.unet.attn_processors[name]
        self.pipe.unet.set_attn_processor(processors)
        tokens = self.pipe.tokenizer(
            [""],
            padding="max_length",
            max_length=self.pipe.tokenizer.model_max_length,
            return_tensors="pt",
        )
        with torch.no_grad():
            self._null = self.pipe.text_encoder(tokens.input_ids.to(self.device))[0][0]
        self._embed_shape = tuple(self._null.shape)

    @classmethod
    def from_params(cls, params: dict[str, Any] | None = None) -> "LDMAdapter":
        return cls(**(params or {}))

    def _module(self, path: str):
        module = self.pipe.unet
        for part in path.split("."):
            module = getattr(module, part)
        return module

    @staticmethod
    def _tokens_at(site: str, latent_side: int) -> int:
        # down_blocks.{i} / up_blocks.{i} halve / double the side; mid block is the coarsest
        if site.startswith("mid_block"):
            return (latent_side // 8) ** 2
        block = int(site.split(".")[1])
        level = block if site.startswith("down_blocks") else 3 - block
        return (latent_side // 2**level) ** 2

    @property
    def latent_shape(self) -> tuple[int, ...]:
        side = self.resolution // 8
        return (4, side, side)

    @property
    def embedding_dim(self) -> int:
        return math.prod(self._embed_shape)

    @property
    def attention_sites(self) -> list[AttentionSite]:
        return list(self._sites)

    def null_embedding(self) -> UncondEmbedding:
        return UncondEmbedding(self._null.reshape(-1).clone(), -1)

    def _predict(self, z: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        dtype = self.pipe.unet.dtype
        context = e.reshape(1, *self._embed_shape).to(self.device, dtype)
        # schedule training step k (1-based, k = 0 is clean) is diffusers timestep k - 1
        unet_t = max(t - 1, 0)
        out = self.pipe.unet(z[None].to(self.device, dtype), unet_t, encoder_hidden_states=context).sample
        return out[0].to(z.dtype)

    def _attention(self, z: torch.Tensor, t: int, e: torch.Tensor) -> dict[AttentionKey, torch.Tensor]:
        self._store.clear()
        self._predict(z, t, e)
        maps: dict[AttentionKey, torch.Tensor] = {}
        for site in self._sites:
            probs = self._store[site.layer_id]
            for head in range(site.head_count):
                maps[(site.layer_id, head)] = probs[head].to(z.dtype)
        return maps

    def coarsest_sites(self) -> list[str]:
        fewest = min(s.token_count for s in self._sites)
        return [s.layer_id for s in self._sites if s.token_count == fewest]


@dataclass
class LDMCodec(LatentCodec):  # pragma: no cover - needs weights
    model_id: str = LDM_MODEL
    device: str = DEVICE
    resolution: int = 512

    codec_id = "ldm-vae"
    # Declared round-trip bound: PSNR >= 25 dB, i.e. RMSE <= 10 ** (-25 / 20).
    tolerance = 10 ** (-25 / 20)

    def __post_init__(self):
        self.pipe = load_pipeline(self.model_id, self.device)

    @classmethod
    def from_params(cls, params: dict[str, Any] | None = None) -> "LDMCodec":
        return cls(**(params or {}))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.resolution, self.resolution, 3)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        side = self.resolution // 8
        return (4, side, side)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        pixels = (x.permute(2, 0, 1)[None] * 2.0 - 1.0).to(self.device, vae.dtype)
        latents = vae.encode(pixels).latent_dist.mean * VAE_SCALE
        return latents[0].to(x.dtype)

    def _decode(self, z: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        image = vae.decode((z[None] / VAE_SCALE).to(self.device, vae.dtype)).sample
        return ((image[0] + 1.0) / 2.0).permute(1, 2, 0).to(z.dtype)
