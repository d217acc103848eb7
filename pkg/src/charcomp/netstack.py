"""The compositional model: character embedding, a char-to-word bidirectional
GRU stack, a word-to-sentence bidirectional GRU stack, and a softmax head.

Forward and backward passes are written by hand on numpy arrays.  Sequences
inside one sentence are processed as a padded batch for speed: padding never
leaks into results because per-sequence read-out happens at each sequence's
own final step, and in the backward pass zero gradients propagate through the
padded region (dh = 0 maps to zero parameter gradients and dh_prev = 0).

Gate layout: every per-direction layer stores fused arrays whose row blocks
are ordered [update z | reset r | candidate].  The recurrence is

    z = sigmoid(W_z x + U_z h_prev + b_z)
    r = sigmoid(W_r x + U_r h_prev + b_r)
    cand = tanh(W_c x + U_c (r * h_prev) + b_c)
    h = (1 - z) * h_prev + z * cand

with zero initial states.  A word/sentence representation is the
concatenation of the final forward and final backward hidden state of the
top layer (2 * hidden entries); empty sequences encode to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Example
from .numkernel import Array, Rng, finite_diff, init_uniform, sigmoid, softmax

MODES = ("train", "eval")


@dataclass(frozen=True)
class ModelShape:
    """Architecture hyperparameters (defaults are the reference setting)."""

    char_emb_dim: int = 25
    hidden: int = 60
    layers_per_stack: int = 2
    directions: int = 2
    classes: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.char_emb_dim < 1 or self.hidden < 1 or self.layers_per_stack < 1:
            raise ValueError(f"invalid model shape: {self}")
        if self.directions != 2:
            raise ValueError("only bidirectional stacks are supported (directions = 2)")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def word_repr_dim(self) -> int:
        return 2 * self.hidden

    @property
    def sent_repr_dim(self) -> int:
        return 2 * self.hidden

    def to_dict(self) -> dict:
        return {
            "char_emb_dim": self.char_emb_dim,
            "hidden": self.hidden,
            "layers_per_stack": self.layers_per_stack,
            "directions": self.directions,
            "word_repr_dim": self.word_repr_dim,
            "sent_repr_dim": self.sent_repr_dim,
            "classes": self.classes,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        shape = cls(
            char_emb_dim=int(d["char_emb_dim"]),
            hidden=int(d["hidden"]),
            layers_per_stack=int(d["layers_per_stack"]),
            directions=int(d.get("directions", 2)),
            classes=int(d["classes"]),
            dropout_rate=float(d["dropout_rate"]),
        )
        for key in ("word_repr_dim", "sent_repr_dim"):
            if key in d and int(d[key]) != 2 * shape.hidden:
                raise ValueError(f"inconsistent shape field {key}: {d[key]} != {2 * shape.hidden}")
        return shape


class GruLayerParams:
    """One direction of one GRU layer (fused gate arrays, see module docs)."""

    __slots__ = ("w_in", "u_rec", "b")

    def __init__(self, w_in: Array, u_rec: Array, b: Array):
        w_in = np.asarray(w_in, dtype=np.float64)
        u_rec = np.asarray(u_rec, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w_in.ndim != 2 or w_in.shape[0] % 3 != 0:
            raise ValueError(f"w_in must be (3*hidden, in_dim), got {w_in.shape}")
        hidden = w_in.shape[0] // 3
        if u_rec.shape != (3 * hidden, hidden):
            raise ValueError(f"u_rec must be {(3 * hidden, hidden)}, got {u_rec.shape}")
        if b.shape != (3 * hidden,):
            raise ValueError(f"b must be {(3 * hidden,)}, got {b.shape}")
        self.w_in = w_in
        self.u_rec = u_rec
        self.b = b

    @property
    def hidden(self) -> int:
        return self.w_in.shape[0] // 3

    @property
    def in_dim(self) -> int:
        return self.w_in.shape[1]

    # per-gate views onto the fused arrays
    @property
    def w_z(self) -> Array:
        return self.w_in[: self.hidden]

    @property
    def w_r(self) -> Array:
        return self.w_in[self.hidden : 2 * self.hidden]

    @property
    def w_c(self) -> Array:
        return self.w_in[2 * self.hidden :]

    @property
    def u_zr(self) -> Array:
        return self.u_rec[: 2 * self.hidden]

    @property
    def u_z(self) -> Array:
        return self.u_rec[: self.hidden]

    @property
    def u_r(self) -> Array:
        return self.u_rec[self.hidden : 2 * self.hidden]

    @property
    def u_c(self) -> Array:
        return self.u_rec[2 * self.hidden :]

    @property
    def b_z(self) -> Array:
        return self.b[: self.hidden]

    @property
    def b_r(self) -> Array:
        return self.b[self.hidden : 2 * self.hidden]

    @property
    def b_c(self) -> Array:
        return self.b[2 * self.hidden :]

    def zeros_like(self) -> "GruLayerParams":
        return GruLayerParams(
            np.zeros_like(self.w_in), np.zeros_like(self.u_rec), np.zeros_like(self.b)
        )

    def copy(self) -> "GruLayerParams":
        return GruLayerParams(self.w_in.copy(), self.u_rec.copy(), self.b.copy())


@dataclass
class BiGruLayer:
    fwd: GruLayerParams
    bwd: GruLayerParams

    def __post_init__(self):
        if (self.fwd.hidden, self.fwd.in_dim) != (self.bwd.hidden, self.bwd.in_dim):
            raise ValueError("forward/backward directions of a layer must share dims")


class BiGruStack:
    """An ordered stack of bidirectional GRU layers with chained dims."""

    def __init__(self, layers: Sequence[BiGruLayer]):
        if not layers:
            raise ValueError("a stack needs at least one layer")
        h = layers[0].fwd.hidden
        for i, layer in enumerate(layers):
            if layer.fwd.hidden != h:
                raise ValueError("all layers in a stack must share the hidden size")
            if i > 0 and layer.fwd.in_dim != 2 * h:
                raise ValueError(
                    f"layer {i} input dim {layer.fwd.in_dim} != 2*hidden = {2 * h}"
                )
        self.layers = list(layers)

    @property
    def hidden(self) -> int:
        return self.layers[0].fwd.hidden

    @property
    def in_dim(self) -> int:
        return self.layers[0].fwd.in_dim

    def zeros_like(self) -> "BiGruStack":
        return BiGruStack(
            [BiGruLayer(l.fwd.zeros_like(), l.bwd.zeros_like()) for l in self.layers]
        )

    def copy(self) -> "BiGruStack":
        return BiGruStack([BiGruLayer(l.fwd.copy(), l.bwd.copy()) for l in self.layers])


class ModelParams:
    """Every learnable array of the model.

    ``char_emb`` row 0 is the reserved unknown-character embedding; it is
    trained like any other row.  The same class doubles as the gradient
    container (see ``zeros_like``), which mirrors all shapes.
    """

    __slots__ = ("shape", "char_emb", "char_stack", "sent_stack", "head_w", "head_b")

    def __init__(
        self,
        shape: ModelShape,
        char_emb: Array,
        char_stack: BiGruStack,
        sent_stack: BiGruStack,
        head_w: Array,
        head_b: Array,
    ):
        char_emb = np.asarray(char_emb, dtype=np.float64)
        head_w = np.asarray(head_w, dtype=np.float64)
        head_b = np.asarray(head_b, dtype=np.float64)
        h2 = 2 * shape.hidden
        if char_emb.ndim != 2 or char_emb.shape[1] != shape.char_emb_dim:
            raise ValueError(f"char_emb must be (vocab+1, {shape.char_emb_dim}), got {char_emb.shape}")
        if char_stack.in_dim != shape.char_emb_dim or char_stack.hidden != shape.hidden:
            raise ValueError("char stack dims do not match the model shape")
        if sent_stack.in_dim != h2 or sent_stack.hidden != shape.hidden:
            raise ValueError("sentence stack dims do not match the model shape")
        if len(char_stack.layers) != shape.layers_per_stack or len(sent_stack.layers) != shape.layers_per_stack:
            raise ValueError("stack depth does not match the model shape")
        if head_w.shape != (shape.classes, h2):
            raise ValueError(f"head_w must be {(shape.classes, h2)}, got {head_w.shape}")
        if head_b.shape != (shape.classes,):
            raise ValueError(f"head_b must be {(shape.classes,)}, got {head_b.shape}")
        self.shape = shape
        self.char_emb = char_emb
        self.char_stack = char_stack
        self.sent_stack = sent_stack
        self.head_w = head_w
        self.head_b = head_b

    def named_arrays(self):
        """All parameter arrays with stable names, in a fixed order."""
        yield "char_embeddings", self.char_emb
        for stack_name, stack in (("char_to_word", self.char_stack), ("word_to_sentence", self.sent_stack)):
            for i, layer in enumerate(stack.layers):
                for dir_name, p in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                    yield f"{stack_name}.layer{i}.{dir_name}.w_in", p.w_in
                    yield f"{stack_name}.layer{i}.{dir_name}.u_rec", p.u_rec
                    yield f"{stack_name}.layer{i}.{dir_name}.b", p.b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            self.shape,
            np.zeros_like(self.char_emb),
            self.char_stack.zeros_like(),
            self.sent_stack.zeros_like(),
            np.zeros_like(self.head_w),
            np.zeros_like(self.head_b),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.shape,
            self.char_emb.copy(),
            self.char_stack.copy(),
            self.sent_stack.copy(),
            self.head_w.copy(),
            self.head_b.copy(),
        )

    def zero_(self) -> None:
        """Zero every array in place (gradient-buffer reuse)."""
        for _, a in self.named_arrays():
            a.fill(0.0)


Gradients = ModelParams  # same structure, accumulates d(loss)/d(theta)


def flatten_params(m: ModelParams) -> Array:
    return np.concatenate([a.ravel() for _, a in m.named_arrays()])


def set_params_flat(m: ModelParams, flat: Array) -> None:
    offset = 0
    for _, a in m.named_arrays():
        n = a.size
        np.copyto(a, flat[offset : offset + n].reshape(a.shape))
        offset += n
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, model needs {offset}")


def _init_layer(rng: Rng, in_dim: int, hidden: int) -> GruLayerParams:
    # Glorot per gate matrix, draw order: W_z, W_r, W_c, U_z, U_r, U_c.
    w_in = np.vstack([init_uniform(rng, hidden, in_dim) for _ in range(3)])
    u_rec = np.vstack([init_uniform(rng, hidden, hidden) for _ in range(3)])
    return GruLayerParams(w_in, u_rec, np.zeros(3 * hidden))


def _init_stack(rng: Rng, first_in_dim: int, shape: ModelShape) -> BiGruStack:
    layers = []
    for i in range(shape.layers_per_stack):
        in_dim = first_in_dim if i == 0 else 2 * shape.hidden
        layers.append(BiGruLayer(_init_layer(rng, in_dim, shape.hidden), _init_layer(rng, in_dim, shape.hidden)))
    return BiGruStack(layers)


def init_params(shape: ModelShape, char_vocab_size: int, rng: Rng) -> ModelParams:
    """Fresh Glorot-initialized model; biases and initial states are zeros."""
    return ModelParams(
        shape,
        init_uniform(rng.fork("init/char_embeddings"), char_vocab_size + 1, shape.char_emb_dim),
        _init_stack(rng.fork("init/char_to_word"), shape.char_emb_dim, shape),
        _init_stack(rng.fork("init/word_to_sentence"), 2 * shape.hidden, shape),
        init_uniform(rng.fork("init/head"), shape.classes, 2 * shape.hidden),
        np.zeros(shape.classes),
    )


def gru_step(p: GruLayerParams, h_prev: Array, x: Array) -> Array:
    """One GRU update, written directly from the gate equations."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (p.hidden,) or x.shape != (p.in_dim,):
        raise ValueError(
            f"gru_step: expected h_prev {(p.hidden,)} and x {(p.in_dim,)}, "
            f"got {h_prev.shape} and {x.shape}"
        )
    z = sigmoid(p.w_z @ x + p.u_z @ h_prev + p.b_z)
    r = sigmoid(p.w_r @ x + p.u_r @ h_prev + p.b_r)
    cand = np.tanh(p.w_c @ x + p.u_c @ (r * h_prev) + p.b_c)
    return (1.0 - z) * h_prev + z * cand


# ---------------------------------------------------------------------------
# Batched sequence engine.  Axis conventions: direction d in {0: forward,
# 1: backward} leads; time-major padded tensors follow, e.g. x is
# (2, T, B, in_dim) where x[1] carries each sequence reversed in time.
# ---------------------------------------------------------------------------


class _LayerTrace:
    __slots__ = ("x", "h", "zr", "hbar", "rh", "drop_mask")

    def __init__(self, x, h, zr, hbar, rh):
        self.x = x
        self.h = h
        self.zr = zr
        self.hbar = hbar
        self.rh = rh
        self.drop_mask = None


class StackTrace:
    """Everything the backward pass needs from one stack invocation."""

    __slots__ = ("lengths", "rev", "layers", "out_mask", "empty", "in_dim")

    def __init__(self, lengths, rev, in_dim):
        self.lengths = lengths
        self.rev = rev
        self.layers: list[_LayerTrace] = []
        self.out_mask = None
        self.empty = False
        self.in_dim = in_dim


def _inverted_dropout_mask(rng: Rng, shape, rate: float) -> Array:
    keep = 1.0 - rate
    u = rng.uniform(size=shape)
    return (u >= rate).astype(np.float64) / keep


def _layer_forward(layer: BiGruLayer, x: Array, h: int) -> _LayerTrace:
    # Divergence shows up as a non-finite loss (checked there), so saturating
    # exp overflow and inf*0 warnings here are silenced rather than printed.
    _, T, B, in_dim = x.shape
    pf, pb = layer.fwd, layer.bwd
    with np.errstate(over="ignore", invalid="ignore"):
        inp = np.empty((2, T, B, 3 * h))
        np.matmul(x[0].reshape(T * B, in_dim), pf.w_in.T, out=inp[0].reshape(T * B, 3 * h))
        inp[0] += pf.b
        np.matmul(x[1].reshape(T * B, in_dim), pb.w_in.T, out=inp[1].reshape(T * B, 3 * h))
        inp[1] += pb.b
    H = np.zeros((2, T + 1, B, h))
    ZR = np.empty((2, T, B, 2 * h))
    HB = np.empty((2, T, B, h))
    RH = np.empty((2, T, B, h))
    uzrT = (pf.u_zr.T, pb.u_zr.T)
    ucT = (pf.u_c.T, pb.u_c.T)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            np.matmul(H[0, t], uzrT[0], out=ZR[0, t])
            ZR[0, t] += inp[0, t, :, : 2 * h]
            np.matmul(H[1, t], uzrT[1], out=ZR[1, t])
            ZR[1, t] += inp[1, t, :, : 2 * h]
            zrt = ZR[:, t]
            np.negative(zrt, out=zrt)
            np.exp(zrt, out=zrt)
            zrt += 1.0
            np.reciprocal(zrt, out=zrt)
            hp = H[:, t]
            np.multiply(zrt[..., h:], hp, out=RH[:, t])
            np.matmul(RH[0, t], ucT[0], out=HB[0, t])
            HB[0, t] += inp[0, t, :, 2 * h :]
            np.matmul(RH[1, t], ucT[1], out=HB[1, t])
            HB[1, t] += inp[1, t, :, 2 * h :]
            hbt = HB[:, t]
            np.tanh(hbt, out=hbt)
            hn = H[:, t + 1]
            np.subtract(hbt, hp, out=hn)
            hn *= zrt[..., :h]
            hn += hp
    return _LayerTrace(x, H, ZR, HB, RH)


def run_stack(
    stack: BiGruStack,
    seqs: Sequence[Array],
    *,
    train: bool = False,
    dropout_rate: float = 0.0,
    rng: Rng | None = None,
) -> tuple[Array, StackTrace]:
    """Encode a batch of sequences; returns (reprs, trace).

    ``seqs[i]`` is a (L_i, in_dim) float array (L_i may be 0).  ``reprs`` is
    (B, 2*hidden).  In train mode inverted dropout is applied between layers
    and on the returned representations, with masks recorded on the trace so
    the paired backward pass reuses them.
    """
    h = stack.hidden
    in_dim = stack.in_dim
    B = len(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    T = int(lengths.max()) if B else 0
    use_dropout = train and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    if B == 0 or T == 0:
        trace = StackTrace(lengths, None, in_dim)
        trace.empty = True
        return np.zeros((B, 2 * h)), trace

    x0 = np.zeros((T, B, in_dim))
    for i, s in enumerate(seqs):
        if len(s):
            x0[: len(s), i] = s
    # per-sequence time reversal; identity on the padded tail
    ts = np.arange(T, dtype=np.intp)[:, None]
    rev = np.where(ts < lengths[None, :], lengths[None, :] - 1 - ts, ts)
    bidx = np.arange(B, dtype=np.intp)
    trace = StackTrace(lengths, rev, in_dim)

    x = np.empty((2, T, B, in_dim))
    x[0] = x0
    x[1] = x0[rev, bidx]
    top = len(stack.layers) - 1
    reprs = np.zeros((B, 2 * h))
    for li, layer in enumerate(stack.layers):
        ltr = _layer_forward(layer, x, h)
        trace.layers.append(ltr)
        outf = ltr.h[0, 1:]
        outb = ltr.h[1, 1:]
        if li < top:
            y = np.empty((T, B, 2 * h))
            y[..., :h] = outf
            y[..., h:] = outb[rev, bidx]
            if use_dropout:
                ltr.drop_mask = _inverted_dropout_mask(rng, y.shape, dropout_rate)
                y *= ltr.drop_mask
            x = np.empty((2, T, B, 2 * h))
            x[0] = y
            x[1] = y[rev, bidx]
        else:
            valid = lengths > 0
            last = lengths[valid] - 1
            reprs[valid, :h] = outf[last, bidx[valid]]
            reprs[valid, h:] = outb[last, bidx[valid]]
            if use_dropout:
                trace.out_mask = _inverted_dropout_mask(rng, reprs.shape, dropout_rate)
                reprs *= trace.out_mask
    return reprs, trace


def _layer_backward(
    layer: BiGruLayer, ltr: _LayerTrace, dout: Array, gf: GruLayerParams, gb: GruLayerParams
) -> Array:
    """Backward through one layer; dout is (2, T, B, h) per-step output grads.

    Accumulates parameter gradients into gf/gb and returns the gradient with
    respect to the layer's two input streams, shaped like ltr.x.
    """
    x, H, ZR, HB, RH = ltr.x, ltr.h, ltr.zr, ltr.hbar, ltr.rh
    _, T, B, in_dim = x.shape
    h = H.shape[-1]
    pf, pb = layer.fwd, layer.bwd
    u_zr = (pf.u_zr, pb.u_zr)
    u_c = (pf.u_c, pb.u_c)
    # no zero-init needed: every entry is written below, and padded positions
    # come out exactly zero because their dh is zero
    dA = np.empty((2, T, B, 3 * h))
    dh = np.zeros((2, B, h))
    dh_prev = np.empty((2, B, h))
    tmp_h = np.empty((2, B, h))
    tmp_zr = np.empty((2, B, 2 * h))
    drh = np.empty((2, B, h))
    mm = np.empty((2, B, h))
    for t in range(T - 1, -1, -1):
        dh += dout[:, t]
        hp = H[:, t]
        zrt = ZR[:, t]
        z = zrt[..., :h]
        r = zrt[..., h:]
        hb = HB[:, t]
        dAt = dA[:, t]
        daz = dAt[..., :h]
        dar = dAt[..., h : 2 * h]
        dac = dAt[..., 2 * h :]
        # candidate branch: d a_c = dh * z * (1 - cand^2)
        np.multiply(hb, hb, out=tmp_h)
        np.subtract(1.0, tmp_h, out=tmp_h)
        np.multiply(dh, z, out=dac)
        dac *= tmp_h
        # update gate (pre-sigmoid later): d z = dh * (cand - h_prev)
        np.subtract(hb, hp, out=daz)
        daz *= dh
        # reset gate: d(r*h_prev) = d a_c @ U_c ; d r = that * h_prev
        np.matmul(dac[0], u_c[0], out=drh[0])
        np.matmul(dac[1], u_c[1], out=drh[1])
        np.multiply(drh, hp, out=dar)
        # dh_prev starts with the blend passthrough dh * (1 - z)
        np.subtract(1.0, zrt, out=tmp_zr)
        np.multiply(dh, tmp_zr[..., :h], out=dh_prev)
        # sigmoid derivative for both gates at once
        tmp_zr *= zrt
        dAt[..., : 2 * h] *= tmp_zr
        np.matmul(dAt[0, :, : 2 * h], u_zr[0], out=mm[0])
        np.matmul(dAt[1, :, : 2 * h], u_zr[1], out=mm[1])
        dh_prev += mm
        drh *= r
        dh_prev += drh
        dh, dh_prev = dh_prev, dh
    dx = np.empty_like(x)
    for d, (p, g) in enumerate(((pf, gf), (pb, gb))):
        dAd = dA[d].reshape(T * B, 3 * h)
        g.w_in += dAd.T @ x[d].reshape(T * B, in_dim)
        hprev = H[d, :T].reshape(T * B, h)
        g.u_rec[: 2 * h] += dA[d, :, :, : 2 * h].reshape(T * B, 2 * h).T @ hprev
        g.u_rec[2 * h :] += dA[d, :, :, 2 * h :].reshape(T * B, h).T @ RH[d].reshape(T * B, h)
        g.b += dAd.sum(axis=0)
        np.matmul(dAd, p.w_in, out=dx[d].reshape(T * B, in_dim))
    return dx


def backward_stack(
    stack: BiGruStack, trace: StackTrace, d_reprs: Array, grads: BiGruStack
) -> list[Array]:
    """Backward through a whole stack invocation.

    ``d_reprs`` is (B, 2*hidden) gradient of the returned representations.
    Accumulates into ``grads`` (a zeros_like of the stack) and returns the
    per-sequence input gradients [(L_i, in_dim), ...].
    """
    h = stack.hidden
    lengths = trace.lengths
    B = len(lengths)
    if trace.empty:
        return [np.zeros((L, trace.in_dim)) for L in lengths]
    rev = trace.rev
    T = rev.shape[0]
    bidx = np.arange(B, dtype=np.intp)
    dr = d_reprs * trace.out_mask if trace.out_mask is not None else d_reprs.copy()
    dout = np.zeros((2, T, B, h))
    valid = lengths > 0
    last = lengths[valid] - 1
    dout[0, last, bidx[valid]] = dr[valid, :h]
    dout[1, last, bidx[valid]] = dr[valid, h:]
    dy = None
    for li in range(len(stack.layers) - 1, -1, -1):
        glayer = grads.layers[li]
        dx = _layer_backward(stack.layers[li], trace.layers[li], dout, glayer.fwd, glayer.bwd)
        dy = dx[0] + dx[1][rev, bidx]
        if li > 0:
            below = trace.layers[li - 1]
            if below.drop_mask is not None:
                dy *= below.drop_mask
            dout = np.empty((2, T, B, h))
            dout[0] = dy[..., :h]
            dout[1] = dy[..., h:][rev, bidx]
    return [dy[: lengths[i], i].copy() for i in range(B)]


# ---------------------------------------------------------------------------
# Model-level forward/backward and the public encoding operations.
# ---------------------------------------------------------------------------


def _check_mode(mode: str) -> bool:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode == "train"


def _embed(m: ModelParams, char_ids: Sequence[int]) -> Array:
    if len(char_ids) == 0:
        return np.zeros((0, m.shape.char_emb_dim))
    ids = np.asarray(char_ids, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= m.char_emb.shape[0]:
        raise ValueError(
            f"character index out of range [0, {m.char_emb.shape[0]}): {ids.tolist()}"
        )
    return m.char_emb[ids]


def encode_words(
    m: ModelParams, char_id_seqs: Sequence[Sequence[int]], mode: str = "eval", rng: Rng | None = None
) -> tuple[Array, StackTrace]:
    """Batched word encoder over the char-to-word stack; returns (B, 2h) reprs."""
    train = _check_mode(mode)
    xs = [_embed(m, ids) for ids in char_id_seqs]
    return run_stack(
        m.char_stack, xs, train=train, dropout_rate=m.shape.dropout_rate, rng=rng
    )


def encode_word(
    m: ModelParams, char_ids: Sequence[int], mode: str = "eval", rng: Rng | None = None
) -> Array:
    """Encode one word's character sequence into its (2*hidden,) representation."""
    reprs, _ = encode_words(m, [char_ids], mode, rng)
    return reprs[0]


def encode_sentence(
    m: ModelParams, word_reprs: Sequence[Array], mode: str = "eval", rng: Rng | None = None
) -> Array:
    """Encode a sequence of word representations into the sentence representation."""
    train = _check_mode(mode)
    dim = 2 * m.shape.hidden
    seq = np.asarray(word_reprs, dtype=np.float64).reshape(len(word_reprs), dim)
    reprs, _ = run_stack(
        m.sent_stack, [seq], train=train, dropout_rate=m.shape.dropout_rate, rng=rng
    )
    return reprs[0]


def _head(m: ModelParams, sent_repr: Array) -> Array:
    return softmax(m.head_w @ sent_repr + m.head_b)


def classify(
    m: ModelParams,
    sentence: Sequence[Sequence[int]],
    mode: str = "eval",
    rng: Rng | None = None,
) -> Array:
    """Class probabilities for a tokenized sentence (per-word char indices).

    Index 0 is NOT-HATE, index 1 is HATE.  Composed exactly from
    encode_word / encode_sentence / softmax(head), so it agrees bitwise with
    those operations applied by hand.
    """
    word_reprs = [encode_word(m, w, mode, rng) for w in sentence]
    s = encode_sentence(m, word_reprs, mode, rng)
    assert s.shape == (m.shape.sent_repr_dim,)
    p = _head(m, s)
    assert p.shape == (m.shape.classes,)
    return p


@dataclass
class FrozenModel:
    """Lookup-only baseline: out-of-vocabulary words map to an all-ones vector."""

    base: ModelParams
    train_vocab: frozenset[str]
    oov_vector: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.oov_vector is None:
            self.oov_vector = np.ones(2 * self.base.shape.hidden)
        if self.oov_vector.shape != (2 * self.base.shape.hidden,):
            raise ValueError("oov_vector dim must equal the word representation dim")
        if not np.all(self.oov_vector == 1.0):
            raise ValueError("oov_vector must be all ones")


def frozen_word_representations(
    f: FrozenModel, words: Sequence[str], char_ids: Sequence[Sequence[int]]
) -> list[Array]:
    reprs = []
    for w, ids in zip(words, char_ids):
        if w in f.train_vocab:
            reprs.append(encode_word(f.base, ids))
        else:
            reprs.append(f.oov_vector)
    return reprs


def frozen_classify(
    f: FrozenModel, words: Sequence[str], char_ids: Sequence[Sequence[int]]
) -> Array:
    """Like classify (eval mode), but with OOV words replaced by the all-ones vector."""
    if len(words) != len(char_ids):
        raise ValueError(f"{len(words)} words but {len(char_ids)} char sequences")
    reprs = frozen_word_representations(f, words, char_ids)
    s = encode_sentence(f.base, reprs)
    return _head(f.base, s)


def _softmax_rows(a: Array) -> Array:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class _BatchForward:
    __slots__ = ("losses", "probs", "sent_reprs", "word_trace", "sent_trace", "word_counts")

    def __init__(self, losses, probs, sent_reprs, word_trace, sent_trace, word_counts):
        self.losses = losses
        self.probs = probs
        self.sent_reprs = sent_reprs
        self.word_trace = word_trace
        self.sent_trace = sent_trace
        self.word_counts = word_counts


def _forward_batch(m: ModelParams, examples: Sequence[Example], rng: Rng | None) -> _BatchForward:
    rate = m.shape.dropout_rate
    train = rate > 0.0
    if train and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    labels = [ex.label for ex in examples]
    for label in labels:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
    all_ids = [ids for ex in examples for ids in ex.char_ids]
    xs = [_embed(m, ids) for ids in all_ids]
    word_reprs, wtr = run_stack(m.char_stack, xs, train=train, dropout_rate=rate, rng=rng)
    assert word_reprs.shape == (len(all_ids), m.shape.word_repr_dim)
    word_counts = [len(ex.char_ids) for ex in examples]
    sent_seqs = []
    offset = 0
    for n in word_counts:
        sent_seqs.append(word_reprs[offset : offset + n])
        offset += n
    sent_reprs, strr = run_stack(m.sent_stack, sent_seqs, train=train, dropout_rate=rate, rng=rng)
    assert sent_reprs.shape == (len(examples), m.shape.sent_repr_dim)
    logits = sent_reprs @ m.head_w.T + m.head_b
    probs = _softmax_rows(logits)
    rows = np.arange(len(examples))
    with np.errstate(divide="ignore"):
        losses = -np.log(probs[rows, labels])
    if not np.all(np.isfinite(losses)):
        raise ValueError("non-finite training loss: divergence")
    return _BatchForward(losses, probs, sent_reprs, wtr, strr, word_counts)


def example_loss(m: ModelParams, example: Example, rng: Rng | None = None) -> float:
    """Cross-entropy loss of one example through the training-mode forward pass."""
    return float(_forward_batch(m, [example], rng).losses[0])


def backward_batch(
    m: ModelParams,
    examples: Sequence[Example],
    rng: Rng | None = None,
    *,
    into: Gradients | None = None,
) -> tuple[Array, Gradients]:
    """Per-example losses and summed gradients for a batch of examples.

    Mathematically this is the sum of independent per-example backward passes
    (the engine just executes them together); dropout masks are drawn once in
    the forward pass and reused here.  With ``into`` given, gradients are
    accumulated into that buffer instead of a fresh one.
    """
    fwd = _forward_batch(m, examples, rng)
    g = into if into is not None else m.zeros_like()
    labels = [ex.label for ex in examples]
    rows = np.arange(len(examples))
    dlogits = fwd.probs.copy()
    dlogits[rows, labels] -= 1.0
    g.head_b += dlogits.sum(axis=0)
    g.head_w += dlogits.T @ fwd.sent_reprs
    ds = dlogits @ m.head_w
    dword_seqs = backward_stack(m.sent_stack, fwd.sent_trace, ds, g.sent_stack)
    dword_all = (
        np.concatenate(dword_seqs)
        if dword_seqs
        else np.zeros((0, m.shape.word_repr_dim))
    )
    dchar = backward_stack(m.char_stack, fwd.word_trace, dword_all, g.char_stack)
    all_ids = [ids for ex in examples for ids in ex.char_ids]
    id_chunks = [np.asarray(ids, dtype=np.intp) for ids in all_ids if len(ids)]
    if id_chunks:
        np.add.at(
            g.char_emb,
            np.concatenate(id_chunks),
            np.concatenate([d for d in dchar if len(d)]),
        )
    return fwd.losses, g


def backward(
    m: ModelParams, example: Example, rng: Rng | None = None, *, into: Gradients | None = None
) -> tuple[float, Gradients]:
    """Loss and d(loss)/d(theta) for one example by backpropagation through time."""
    losses, g = backward_batch(m, [example], rng, into=into)
    return float(losses[0]), g


def _sentence_probs(m: ModelParams, sent_seqs: Sequence[Array]) -> Array:
    """Eval-mode head over already-encoded word-representation sequences."""
    sent_reprs, _ = run_stack(m.sent_stack, sent_seqs)
    return _softmax_rows(sent_reprs @ m.head_w.T + m.head_b)


def eval_probs(
    m: ModelParams, sentences: Sequence[Sequence[Sequence[int]]], chunk_size: int = 64
) -> Array:
    """Eval-mode class probabilities for many sentences, processed in chunks.

    Numerically this batches the same computation as classify; use classify
    when per-word compositional equality matters bitwise.
    """
    out = np.empty((len(sentences), m.shape.classes))
    for start in range(0, len(sentences), chunk_size):
        chunk = sentences[start : start + chunk_size]
        all_ids = [ids for s in chunk for ids in s]
        word_reprs, _ = run_stack(m.char_stack, [_embed(m, ids) for ids in all_ids])
        sent_seqs = []
        offset = 0
        for s in chunk:
            sent_seqs.append(word_reprs[offset : offset + len(s)])
            offset += len(s)
        out[start : start + len(chunk)] = _sentence_probs(m, sent_seqs)
    return out


def frozen_eval_probs(
    f: FrozenModel,
    sentences_words: Sequence[Sequence[str]],
    sentences_char_ids: Sequence[Sequence[Sequence[int]]],
    chunk_size: int = 64,
) -> Array:
    """Batched frozen-model probabilities (OOV words become the all-ones vector).

    On fully in-vocabulary input this performs exactly the same batched
    computation as eval_probs, so the two agree bitwise there.
    """
    if len(sentences_words) != len(sentences_char_ids):
        raise ValueError("words/char_ids sentence counts differ")
    m = f.base
    dim = 2 * m.shape.hidden
    out = np.empty((len(sentences_words), m.shape.classes))
    for start in range(0, len(sentences_words), chunk_size):
        words_chunk = sentences_words[start : start + chunk_size]
        ids_chunk = sentences_char_ids[start : start + chunk_size]
        known_ids = []
        known_flags: list[list[bool]] = []
        for words, char_ids in zip(words_chunk, ids_chunk):
            if len(words) != len(char_ids):
                raise ValueError(f"{len(words)} words but {len(char_ids)} char sequences")
            flags = []
            for w, ids in zip(words, char_ids):
                known = w in f.train_vocab
                flags.append(known)
                if known:
                    known_ids.append(ids)
            known_flags.append(flags)
        word_reprs, _ = run_stack(m.char_stack, [_embed(m, ids) for ids in known_ids])
        sent_seqs = []
        offset = 0
        for flags in known_flags:
            seq = np.empty((len(flags), dim))
            for j, known in enumerate(flags):
                if known:
                    seq[j] = word_reprs[offset]
                    offset += 1
                else:
                    seq[j] = f.oov_vector
            sent_seqs.append(seq)
        out[start : start + len(words_chunk)] = _sentence_probs(m, sent_seqs)
    return out


# ---------------------------------------------------------------------------
# Gradient verification against central finite differences.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckGroup:
    name: str
    max_rel_err: float


def _relative_error(a: Array, b: Array) -> Array:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def _gradcheck_examples(rng: Rng, n_chars: int) -> list[Example]:
    examples = []
    for label, n_words in ((0, 1), (1, 2), (0, 3)):
        words = []
        char_ids = []
        for w in range(n_words):
            length = rng.randbelow(4) + 1
            ids = tuple(rng.randbelow(n_chars + 1) for _ in range(length))
            char_ids.append(ids)
            words.append(f"w{w}")
        examples.append(Example(words=tuple(words), char_ids=tuple(char_ids), label=label))
    return examples


def gradient_check(
    seed: int = 0, step: float = 1e-5, layer_counts: Sequence[int] = (1, 2)
) -> list[GradCheckGroup]:
    """Compare analytic gradients to central finite differences.

    Uses a downsized model (embedding dim 3, hidden 4, dropout disabled) over
    a few short random sentences.  The relative error of entry i is
    |a_i - fd_i| / max(1, |a_i|, |fd_i|); the result reports the max per
    parameter group, prefixed with the stack depth being exercised.
    """
    results = []
    for L in layer_counts:
        shape = ModelShape(char_emb_dim=3, hidden=4, layers_per_stack=L, dropout_rate=0.0)
        rng = Rng(seed).fork(f"gradcheck/layers{L}")
        n_chars = 5
        params = init_params(shape, n_chars, rng.fork("params"))
        examples = _gradcheck_examples(rng.fork("data"), n_chars)
        analytic = params.zeros_like()
        for ex in examples:
            backward(params, ex, into=analytic)
        flat0 = flatten_params(params)

        def total_loss(v: Array) -> float:
            set_params_flat(params, v)
            return sum(example_loss(params, ex) for ex in examples)

        fd = finite_diff(total_loss, flat0, step)
        set_params_flat(params, flat0)
        offset = 0
        fd_named = {}
        for name, a in params.named_arrays():
            fd_named[name] = fd[offset : offset + a.size].reshape(a.shape)
            offset += a.size
        for name, a in analytic.named_arrays():
            err = float(_relative_error(a, fd_named[name]).max())
            results.append(GradCheckGroup(name=f"layers{L}:{name}", max_rel_err=err))
    return results
