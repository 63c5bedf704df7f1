"""Second-stage refinement networks.

``ct3d``: keypoint-subtraction embedding, self-attention encoder, channel-wise decoder.
``ct3dpp``: geometric/semantic fusion embedding, point-to-key bidirectional
encoder, channel-wise decoder. Every component can be swapped for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import (AttentionConfig, Decoder, DecoderScheme, MLPEncoder, PBCEncoder,
                        SelfAttentionEncoder)
from .autodiff import Tensor
from .embedding import RAW_DIM, FusionEmbedding, KeypointEmbedding
from .head import DetectHead, RefineOutput
from .nn import ParameterSet

VARIANTS = ("ct3d", "ct3dpp")
ENCODERS = ("self_attention", "pbc", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "ct3dpp"
    attn: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: str = "extended"
    encoder: str = ""  # empty: variant default
    use_bev: bool = True
    decode_from: str = "points"
    canonical: bool = False
    bev_channels: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        DecoderScheme(self.decoder)
        if self.encoder and self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.decode_from not in ("points", "keypoints"):
            raise ValueError(f"decode_from must be 'points' or 'keypoints', got {self.decode_from!r}")
        if self.variant == "ct3d" and self.resolved_encoder == "pbc":
            raise ValueError("the pbc encoder needs keypoint features, which only ct3dpp embeds")
        if self.decode_from == "keypoints" and self.resolved_encoder != "pbc":
            raise ValueError("decoding from keypoints requires the pbc encoder")

    @property
    def d_model(self) -> int:
        return self.attn.d_model

    @property
    def resolved_encoder(self) -> str:
        return self.encoder or ("self_attention" if self.variant == "ct3d" else "pbc")

    @property
    def input_dim(self) -> int:
        return RAW_DIM if self.variant == "ct3d" else RAW_DIM + self.bev_channels

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class RefineModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterSet(np.random.default_rng(seed))
        d = cfg.d_model
        if cfg.variant == "ct3d":
            self.embed = KeypointEmbedding(self.params, d)
        else:
            self.embed = FusionEmbedding(self.params, d, cfg.bev_channels)
        enc = cfg.resolved_encoder
        if enc == "pbc":
            self.encoder = PBCEncoder(self.params, cfg.attn)
        elif enc == "mlp":
            self.encoder = MLPEncoder(self.params, cfg.attn)
        else:
            self.encoder = SelfAttentionEncoder(self.params, cfg.attn)
        self.decoder = Decoder(self.params, d, cfg.decoder, cfg.attn.n_heads)
        self.head = DetectHead(self.params, d)

    def features(self, point_raw, keypoint_raw=None) -> Tensor:
        """Decoded ``(B, 1, D)`` proposal features from raw inputs."""
        pr = point_raw if isinstance(point_raw, Tensor) else Tensor(point_raw)
        if self.cfg.variant == "ct3d":
            emb = self.embed(pr)
        else:
            if keypoint_raw is None:
                raise ValueError("ct3dpp needs keypoint inputs")
            kr = keypoint_raw if isinstance(keypoint_raw, Tensor) else Tensor(keypoint_raw)
            emb = self.embed(pr, kr)
        x, xk = self.encoder(emb.point_feats, emb.keypoint_feats)
        return self.decoder(xk if self.cfg.decode_from == "keypoints" else x)

    def __call__(self, point_raw, keypoint_raw=None) -> RefineOutput:
        return self.head(self.features(point_raw, keypoint_raw))

    def predict(self, point_raw, keypoint_raw=None, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Forward without a graph; returns ``(logits (M,), residuals (M, 7))``."""
        logits, res = [], []
        with ad.no_grad():
            for s in range(0, len(point_raw), batch):
                kr = None if keypoint_raw is None else keypoint_raw[s:s + batch]
                out = self(point_raw[s:s + batch], kr)
                logits.append(out.confidence_logit.data.copy())
                res.append(out.residual.data.copy())
        if not logits:
            return np.zeros(0, np.float32), np.zeros((0, 7), np.float32)
        return np.concatenate(logits), np.concatenate(res)
