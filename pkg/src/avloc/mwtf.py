"""Multi-window temporal fusion: split a feature sequence into temporal
blocks per window layout, fuse each block with attention over the temporal
and/or feature axis, and aggregate across blocks and sub-modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .layers import linear
from .numkit import ParamStore, Tensor

ATTENTION_MODES = ("temporal", "feature", "multi_domain")

NORM_EPS = 1e-5


class LayoutError(ValueError):
    """A window layout does not tile the sequence length."""


@dataclass(frozen=True)
class WindowLayout:
    """Ordered block lengths for one fusion sub-module; must sum to T."""

    blocks: tuple[int, ...]

    def __post_init__(self):
        if not self.blocks or any(w < 1 for w in self.blocks):
            raise LayoutError(f"window lengths must be >= 1, got {list(self.blocks)}")

    @property
    def total(self) -> int:
        return sum(self.blocks)

    def check(self, t_len: int, submodule: int) -> None:
        if self.total != t_len:
            raise LayoutError(
                f"sub-module {submodule}: window lengths {list(self.blocks)} "
                f"sum to {self.total}, expected T={t_len}")


def parse_layouts(raw: list[list[int]]) -> list[WindowLayout]:
    return [WindowLayout(tuple(int(w) for w in blocks)) for blocks in raw]


@dataclass
class FusionConfig:
    """Window layout per sub-module, attention-axis mode, internal width,
    and whether sub-modules share one physical parameter set."""

    layouts: list[WindowLayout]
    width: int
    shared_weights: bool = True
    mode: str = "multi_domain"

    def __post_init__(self):
        if self.mode not in ATTENTION_MODES:
            raise ValueError(f"attention mode must be one of {ATTENTION_MODES}, got {self.mode!r}")
        if self.width < 1:
            raise ValueError(f"fusion width must be >= 1, got {self.width}")

    @property
    def n_submodules(self) -> int:
        return len(self.layouts)

    @property
    def output_width(self) -> int:
        return self.n_submodules * self.width

    def check(self, t_len: int) -> None:
        for i, layout in enumerate(self.layouts):
            layout.check(t_len, i)


@dataclass
class FusionSubmoduleParams:
    """Six projections per sub-module: two-stage query/key/value maps."""

    wq_in: Tensor    # (d, Din)
    wq_out: Tensor   # (d, d)
    wk_in: Tensor    # (d, Din)
    wk_out: Tensor   # (d, d)
    wv_in: Tensor    # (d, Din)
    wv_out: Tensor   # (d, d)

    FIELDS = ("wq_in", "wq_out", "wk_in", "wk_out", "wv_in", "wv_out")

    @property
    def width(self) -> int:
        return self.wq_in.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_width: int, width: int,
               rng: np.random.Generator) -> "FusionSubmoduleParams":
        shapes = {"wq_in": (width, input_width), "wq_out": (width, width),
                  "wk_in": (width, input_width), "wk_out": (width, width),
                  "wv_in": (width, input_width), "wv_out": (width, width)}
        return cls(**{f: store.create(f"{prefix}.{f}", shapes[f], rng) for f in cls.FIELDS})

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "FusionSubmoduleParams":
        return cls(**{f: store[f"{prefix}.{f}"] for f in cls.FIELDS})


def create_fusion_params(store: ParamStore, prefix: str, input_width: int,
                         cfg: FusionConfig, rng: np.random.Generator
                         ) -> list[FusionSubmoduleParams]:
    """One parameter set when shared, else one per sub-module."""
    if cfg.shared_weights:
        return [FusionSubmoduleParams.create(store, f"{prefix}.shared", input_width,
                                             cfg.width, rng)]
    return [FusionSubmoduleParams.create(store, f"{prefix}.sub{i}", input_width,
                                         cfg.width, rng)
            for i in range(cfg.n_submodules)]


def load_fusion_params(store: ParamStore, prefix: str,
                       cfg: FusionConfig) -> list[FusionSubmoduleParams]:
    if cfg.shared_weights:
        return [FusionSubmoduleParams.from_store(store, f"{prefix}.shared")]
    return [FusionSubmoduleParams.from_store(store, f"{prefix}.sub{i}")
            for i in range(cfg.n_submodules)]


# ---------------------------------------------------------------------------
# the three fusion phases
# ---------------------------------------------------------------------------


def split(f: Tensor, layout: WindowLayout, submodule: int = 0) -> list[Tensor]:
    """Contiguous, non-overlapping blocks covering [0, T) in order."""
    layout.check(f.shape[0], submodule)
    blocks = []
    at = 0
    for w in layout.blocks:
        blocks.append(nk.slice_rows(f, at, at + w))
        at += w
    return blocks


def qkv_project(block: Tensor, p: FusionSubmoduleParams) -> tuple[Tensor, Tensor, Tensor]:
    """Row-wise two-stage projections of the normalized block.

    Query and key pass through tanh between stages, value through relu.
    """
    normed = nk.layer_norm(block, NORM_EPS)
    q = linear(nk.tanh(linear(normed, p.wq_in)), p.wq_out)
    k = linear(nk.tanh(linear(normed, p.wk_in)), p.wk_out)
    v = linear(nk.relu(linear(normed, p.wv_in)), p.wv_out)
    return q, k, v


def attention_maps(q: Tensor, k: Tensor, mode: str) -> tuple[Tensor | None, Tensor | None]:
    """Temporal map: softmax over rows of Q K^T / sqrt(d)  (w x w, row-stochastic).
    Feature map: softmax over columns of K^T Q / sqrt(w)  (d x d, column-stochastic).
    """
    w, d = q.shape
    a_t = None
    a_f = None
    if mode in ("temporal", "multi_domain"):
        beta_t = nk.mul(nk.matmul_nt(q, k), 1.0 / np.sqrt(d))
        a_t = nk.softmax_axis(beta_t, "rows")
    if mode in ("feature", "multi_domain"):
        beta_f = nk.mul(nk.matmul_tn(k, q), 1.0 / np.sqrt(w))
        a_f = nk.softmax_axis(beta_f, "cols")
    return a_t, a_f


def apply_attention(a_t: Tensor | None, v: Tensor, a_f: Tensor | None, mode: str) -> Tensor:
    """Sequential application on each live axis of V."""
    if mode == "temporal":
        return nk.matmul(a_t, v)
    if mode == "feature":
        return nk.matmul(v, a_f)
    if mode == "multi_domain":
        return nk.matmul(a_t, nk.matmul(v, a_f))
    raise ValueError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")


def fuse_block(block: Tensor, p: FusionSubmoduleParams, mode: str) -> Tensor:
    q, k, v = qkv_project(block, p)
    a_t, a_f = attention_maps(q, k, mode)
    return apply_attention(a_t, v, a_f, mode)


def mwtf_forward(f: Tensor, cfg: FusionConfig,
                 params: list[FusionSubmoduleParams]) -> Tensor:
    """Fuse every block of every sub-module and aggregate.

    Block outputs concatenate along time into one (T, d) map per
    sub-module; sub-module maps concatenate along channels into
    (T, N*d). With shared weights all sub-modules use params[0].
    """
    cfg.check(f.shape[0])
    expected = 1 if cfg.shared_weights else cfg.n_submodules
    if len(params) != expected:
        raise ValueError(f"expected {expected} parameter set(s), got {len(params)}")
    per_submodule = []
    for i, layout in enumerate(cfg.layouts):
        p = params[0] if cfg.shared_weights else params[i]
        fused = [fuse_block(b, p, cfg.mode) for b in split(f, layout, i)]
        per_submodule.append(fused[0] if len(fused) == 1 else nk.concat_rows(fused))
    if len(per_submodule) == 1:
        return per_submodule[0]
    return nk.concat_cols(per_submodule)
