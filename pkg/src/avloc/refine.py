"""Event-guided temporal refinement: a learned per-timestep gate that
amplifies event segments, a single-window refiner pass, and the final
per-segment classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .layers import BiLstmParams, bilstm, linear
from .mwtf import NORM_EPS, FusionConfig, FusionSubmoduleParams, create_fusion_params, \
    load_fusion_params, mwtf_forward
from .numkit import ParamStore, Tensor


@dataclass
class RefineParams:
    """Gate head, refiner fusion parameters, and classifier head."""

    gate_lstm: BiLstmParams          # input N*d -> hidden states of width d'
    event_score: Tensor              # (1, d')
    refiner: list[FusionSubmoduleParams]
    cls_lstm: BiLstmParams           # input refiner output -> width d''
    class_proj: Tensor               # (C, d'')

    @classmethod
    def create(cls, store: ParamStore, prefix: str, fusion_out_width: int,
               gate_width: int, refiner_cfg: FusionConfig, cls_width: int,
               n_classes: int, rng: np.random.Generator) -> "RefineParams":
        if gate_width % 2 or cls_width % 2:
            raise ValueError("gate and classifier widths must be even (two directions)")
        return cls(
            gate_lstm=BiLstmParams.create(store, f"{prefix}.gate_lstm",
                                          fusion_out_width, gate_width // 2, rng),
            event_score=store.create(f"{prefix}.event_score", (1, gate_width), rng),
            refiner=create_fusion_params(store, f"{prefix}.refiner", fusion_out_width,
                                         refiner_cfg, rng),
            cls_lstm=BiLstmParams.create(store, f"{prefix}.cls_lstm",
                                         refiner_cfg.output_width, cls_width // 2, rng),
            class_proj=store.create(f"{prefix}.class_proj", (n_classes, cls_width), rng),
        )

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, fusion_out_width: int,
                   gate_width: int, refiner_cfg: FusionConfig,
                   cls_width: int) -> "RefineParams":
        return cls(
            gate_lstm=BiLstmParams.from_store(store, f"{prefix}.gate_lstm",
                                              fusion_out_width, gate_width // 2),
            event_score=store[f"{prefix}.event_score"],
            refiner=load_fusion_params(store, f"{prefix}.refiner", refiner_cfg),
            cls_lstm=BiLstmParams.from_store(store, f"{prefix}.cls_lstm",
                                             refiner_cfg.output_width, cls_width // 2),
            class_proj=store[f"{prefix}.class_proj"],
        )


def egta(fused: Tensor, p: RefineParams) -> Tensor:
    """Per-timestep event gate in (0, 1): sigmoid of a scored BiLSTM pass
    over the normalized fusion vector. Shape (T, 1)."""
    return nk.sigmoid(linear(bilstm(nk.layer_norm(fused, NORM_EPS), p.gate_lstm),
                             p.event_score))


def apply_mask(fused: Tensor, alpha: Tensor) -> Tensor:
    """Scale row t of the fusion vector by alpha[t] (broadcast over channels)."""
    if alpha.shape != (fused.shape[0], 1):
        raise nk.ShapeError(f"mask shape {alpha.shape} does not match rows of {fused.shape}")
    return nk.mul(fused, alpha)


def refine_classify(masked: Tensor, p: RefineParams, refiner_cfg: FusionConfig) -> Tensor:
    """Single(-ish) window refiner fusion, then the per-segment classifier.

    Returns class probabilities (T, C); rows sum to 1.
    """
    refined = mwtf_forward(masked, refiner_cfg, p.refiner)
    logits = linear(bilstm(nk.layer_norm(refined, NORM_EPS), p.cls_lstm), p.class_proj)
    return nk.softmax_axis(logits, "rows")
