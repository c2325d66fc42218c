"""Neural building blocks: linear maps, bidirectional LSTM encoders, and
audio-guided spatial attention over video region features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import ParamStore, ShapeError, Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T (+ b per row). w is (Dout, Din)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear width mismatch: x {x.shape} vs w {w.shape}")
    out = nk.matmul_nt(x, w)
    if b is not None:
        out = nk.add(out, b)
    return out


# ---------------------------------------------------------------------------
# bidirectional LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmDirectionParams:
    """One direction's gate parameters; each weight is (H, Din + H)."""

    w_input: Tensor
    w_forget: Tensor
    w_cell: Tensor
    w_output: Tensor
    b_input: Tensor
    b_forget: Tensor
    b_cell: Tensor
    b_output: Tensor


@dataclass
class BiLstmParams:
    fwd: LstmDirectionParams
    bwd: LstmDirectionParams
    input_width: int
    hidden: int

    @property
    def output_width(self) -> int:
        return 2 * self.hidden

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_width: int, hidden: int,
               rng: np.random.Generator) -> "BiLstmParams":
        """Register fresh parameters; forget-gate biases start at 1.0."""
        def direction(tag: str) -> LstmDirectionParams:
            shape = (hidden, input_width + hidden)
            return LstmDirectionParams(
                w_input=store.create(f"{prefix}.{tag}.w_input", shape, rng),
                w_forget=store.create(f"{prefix}.{tag}.w_forget", shape, rng),
                w_cell=store.create(f"{prefix}.{tag}.w_cell", shape, rng),
                w_output=store.create(f"{prefix}.{tag}.w_output", shape, rng),
                b_input=store.create(f"{prefix}.{tag}.b_input", (hidden,), rng, init="const"),
                b_forget=store.create(f"{prefix}.{tag}.b_forget", (hidden,), rng,
                                      init="const", fill=1.0),
                b_cell=store.create(f"{prefix}.{tag}.b_cell", (hidden,), rng, init="const"),
                b_output=store.create(f"{prefix}.{tag}.b_output", (hidden,), rng, init="const"),
            )

        return cls(fwd=direction("fwd"), bwd=direction("bwd"),
                   input_width=input_width, hidden=hidden)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, input_width: int,
                   hidden: int) -> "BiLstmParams":
        def direction(tag: str) -> LstmDirectionParams:
            return LstmDirectionParams(
                *(store[f"{prefix}.{tag}.{f}"]
                  for f in ("w_input", "w_forget", "w_cell", "w_output",
                            "b_input", "b_forget", "b_cell", "b_output")))

        return cls(fwd=direction("fwd"), bwd=direction("bwd"),
                   input_width=input_width, hidden=hidden)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _lstm_scan(x: np.ndarray, w: np.ndarray, b: np.ndarray, hidden: int):
    """Plain LSTM over the rows of x with zero initial state.

    Returns hidden states (T, H) and the cache needed for BPTT. Gate order
    inside the stacked weight/bias is (input, forget, cell, output). The
    input contribution to the gates is one batched gemm; only the hidden
    recurrence stays in the loop.
    """
    t_len, din = x.shape
    w_x = w[:, :din]
    w_h = w[:, din:]
    z_in = x @ w_x.T + b      # (T, 4H)
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    hs = np.empty((t_len, hidden))
    gates = np.empty((t_len, 4 * hidden))
    cells = np.empty((t_len, 2 * hidden))   # (c_prev, tanh(c)) per step
    for t in range(t_len):
        z = z_in[t] + w_h @ h
        gi = _sigmoid(z[:hidden])
        gf = _sigmoid(z[hidden:2 * hidden])
        gc = np.tanh(z[2 * hidden:3 * hidden])
        go = _sigmoid(z[3 * hidden:])
        cells[t, :hidden] = c
        c = gf * c + gi * gc
        tc = np.tanh(c)
        h = go * tc
        hs[t] = h
        gates[t, :hidden] = gi
        gates[t, hidden:2 * hidden] = gf
        gates[t, 2 * hidden:3 * hidden] = gc
        gates[t, 3 * hidden:] = go
        cells[t, hidden:] = tc
    return hs, (gates, cells)


def _lstm_scan_backward(g_h: np.ndarray, x: np.ndarray, hs: np.ndarray,
                        w: np.ndarray, cache, hidden: int):
    """BPTT through one direction: gradients wrt x, w, b given dL/dh per step."""
    gates, cells = cache
    t_len, din = x.shape
    w_h = w[:, din:]
    dz = np.empty((t_len, 4 * hidden))
    dh_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    for t in range(t_len - 1, -1, -1):
        gi = gates[t, :hidden]
        gf = gates[t, hidden:2 * hidden]
        gc = gates[t, 2 * hidden:3 * hidden]
        go = gates[t, 3 * hidden:]
        c_prev = cells[t, :hidden]
        tc = cells[t, hidden:]
        dh = g_h[t] + dh_next
        d_go = dh * tc
        dc = dc_next + dh * go * (1.0 - tc * tc)
        dc_next = dc * gf
        dz_t = dz[t]
        dz_t[:hidden] = dc * gc * gi * (1.0 - gi)
        dz_t[hidden:2 * hidden] = dc * c_prev * gf * (1.0 - gf)
        dz_t[2 * hidden:3 * hidden] = dc * gi * (1.0 - gc * gc)
        dz_t[3 * hidden:] = d_go * go * (1.0 - go)
        dh_next = w_h.T @ dz_t
    h_prev = np.vstack([np.zeros((1, hidden)), hs[:-1]])
    dw = np.concatenate([dz.T @ x, dz.T @ h_prev], axis=1)
    db = dz.sum(axis=0)
    dx = dz @ w[:, :din]
    return dx, dw, db


def bilstm(x: Tensor, p: BiLstmParams) -> Tensor:
    """Bidirectional LSTM: per-timestep concat of forward and reverse hidden
    states, zero initial states, differentiable through time.

    The recurrence runs as one fused graph node with a hand-written
    backward pass (kept honest by the finite-difference oracle).
    """
    if x.data.ndim != 2 or x.shape[1] != p.input_width:
        raise ShapeError(f"bilstm expects (T, {p.input_width}), got {x.shape}")
    hidden = p.hidden

    w_f = nk.concat_rows([p.fwd.w_input, p.fwd.w_forget, p.fwd.w_cell, p.fwd.w_output])
    b_f = nk.concat_rows([p.fwd.b_input, p.fwd.b_forget, p.fwd.b_cell, p.fwd.b_output])
    w_r = nk.concat_rows([p.bwd.w_input, p.bwd.w_forget, p.bwd.w_cell, p.bwd.w_output])
    b_r = nk.concat_rows([p.bwd.b_input, p.bwd.b_forget, p.bwd.b_cell, p.bwd.b_output])

    x_rev = x.data[::-1]
    h_fwd, cache_f = _lstm_scan(x.data, w_f.data, b_f.data, hidden)
    h_rev, cache_r = _lstm_scan(x_rev, w_r.data, b_r.data, hidden)
    out_data = np.concatenate([h_fwd, h_rev[::-1]], axis=1)

    out = nk._node(out_data, (x, w_f, b_f, w_r, b_r), "bilstm")
    if out._parents:
        def _bw():
            g = out.grad
            dx_f, dw_f, db_f = _lstm_scan_backward(
                g[:, :hidden], x.data, h_fwd, w_f.data, cache_f, hidden)
            dx_r, dw_r, db_r = _lstm_scan_backward(
                g[:, hidden:][::-1], x_rev, h_rev, w_r.data, cache_r, hidden)
            if x.requires_grad:
                x.grad += dx_f + dx_r[::-1]
            if w_f.requires_grad:
                w_f.grad += dw_f
            if b_f.requires_grad:
                b_f.grad += db_f
            if w_r.requires_grad:
                w_r.grad += dw_r
            if b_r.requires_grad:
                b_r.grad += db_r
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# audio-guided video attention
# ---------------------------------------------------------------------------


@dataclass
class AgvaParams:
    """Additive attention over R video regions conditioned on the audio feature."""

    video_proj: Tensor   # (h, Dv)
    audio_proj: Tensor   # (h, Da)
    score: Tensor        # (1, h)

    @property
    def joint_width(self) -> int:
        return self.video_proj.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, video_width: int, audio_width: int,
               joint_width: int, rng: np.random.Generator) -> "AgvaParams":
        if joint_width < 1:
            raise ValueError(f"joint width must be >= 1, got {joint_width}")
        return cls(
            video_proj=store.create(f"{prefix}.video_proj", (joint_width, video_width), rng),
            audio_proj=store.create(f"{prefix}.audio_proj", (joint_width, audio_width), rng),
            score=store.create(f"{prefix}.score", (1, joint_width), rng),
        )

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "AgvaParams":
        return cls(video_proj=store[f"{prefix}.video_proj"],
                   audio_proj=store[f"{prefix}.audio_proj"],
                   score=store[f"{prefix}.score"])


def agva(video: Tensor, audio: Tensor, p: AgvaParams) -> Tensor:
    """Pool region features to one vector per timestep.

    Per timestep t the score of region r is score . tanh(Uv v_tr + Ua a_t);
    a softmax over regions weights the sum of region features, so the
    output row lies in the convex hull of that timestep's regions. With
    R = 1 this is an exact pass-through.
    """
    if video.data.ndim != 3:
        raise ShapeError(f"agva expects video (T, R, Dv), got {video.shape}")
    t_len, regions, dv = video.shape
    if audio.data.ndim != 2 or audio.shape[0] != t_len:
        raise ShapeError(f"agva audio (T, Da) must share T={t_len}, got {audio.shape}")

    flat = nk.reshape(video, (t_len * regions, dv))
    joint = nk.tanh(nk.add(linear(flat, p.video_proj),
                           nk.repeat_rows(linear(audio, p.audio_proj), regions)))
    logits = nk.reshape(linear(joint, p.score), (t_len, regions))
    weights = nk.softmax_axis(logits, "rows")
    weighted = nk.mul(nk.reshape(weights, (t_len * regions, 1)), flat)
    return nk.sum_row_groups(weighted, regions)


def agva_weights(video: Tensor, audio: Tensor, p: AgvaParams) -> np.ndarray:
    """The (T, R) region attention map alone, for inspection and tests."""
    t_len, regions, dv = video.shape
    with nk.no_grad():
        flat = nk.reshape(video, (t_len * regions, dv))
        joint = nk.tanh(nk.add(linear(flat, p.video_proj),
                               nk.repeat_rows(linear(audio, p.audio_proj), regions)))
        logits = nk.reshape(linear(joint, p.score), (t_len, regions))
        return nk.softmax_axis(logits, "rows").data
