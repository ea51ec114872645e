"""Genome-configured transformer encoder/decoder for window reconstruction.

Width conventions: ``m`` input features, ``d_model = 2 * m``, ``n_heads = m``
and therefore a head width of 2.

Conditioning. Passes after the first may receive a condition tensor shaped
like the window (the focus score, or the previous deviation). With
``self_conditioning`` the condition is concatenated to the input as ``m``
extra channels before the embedding. Without it there is no extra channel and
multi-pass phase types add the condition to the input instead, so the
parameter count differs between the two settings.

Parameter count, with ``c`` input channels (``2m`` when self-conditioning,
else ``m``), ``d = 2m``, ``F = dim_feedforward``, ``L = ffn_layers``::

    embedding   c*d + d                      (only with linear embedding)
    norm        2*d                          (every norm, all three kinds)
    attention   4*(d*d + d)
    ffn         (d*F + F) + (L-1)*(F*F + F) + (F*d + d)
    enc layer   attention + ffn + 2 norms
    dec layer   2 attention + ffn + 3 norms
    decoder     decoder_layers * dec layer + (d*m + m)
    total       embedding + norm + encoder_layers * enc layer + n_decoders * decoder

``n_decoders`` is 2 for ``2phase`` and 1 otherwise.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError, ParseError
from .genome import Genome

CHECKPOINT_MAGIC = b"TSADNAS\x00"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.1


def positional_encoding(kind: str, K: int, d_model: int, seed: int = 0,
                        freq_range: tuple[float, float] | None = None) -> np.ndarray:
    """Fixed ``K x d_model`` position table.

    ``fourier`` uses ``d_model/2`` random frequencies drawn log-uniformly from
    ``freq_range`` (default ``[1/K, 1]``); even columns hold the sines and odd
    columns the cosines, the same layout as the sinusoidal table.
    """
    if K < 1 or d_model < 1:
        raise ContractError("K and d_model must be >= 1")
    t = np.arange(K, dtype=np.float64)[:, None]
    n_pairs = (d_model + 1) // 2
    if kind == "sinusoidal":
        freqs = 1.0 / 10000.0 ** (2.0 * np.arange(n_pairs) / d_model)
    elif kind == "fourier":
        lo, hi = freq_range or (1.0 / K, 1.0)
        rng = np.random.default_rng(seed)
        freqs = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n_pairs))
    else:
        raise ContractError(f"unknown positional encoding {kind!r}")
    pe = np.empty((K, 2 * n_pairs))
    pe[:, 0::2] = np.sin(t * freqs)
    pe[:, 1::2] = np.cos(t * freqs)
    return pe[:, :d_model]


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         w_out: Tensor | None = None, b_out: Tensor | None = None):
    """Scaled dot-product attention split over ``n_heads`` heads.

    ``q`` is ``(..., Lq, d)``; ``k`` and ``v`` are ``(..., Lk, d)`` and are
    already projected. Heads are concatenated and, when ``w_out`` is given,
    output-projected. Returns ``(output, weights)`` with weights shaped
    ``(..., n_heads, Lq, Lk)``.
    """
    d = q.shape[-1]
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    if k.shape[-1] != d or v.shape != k.shape:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    hd = d // n_heads
    lead = q.shape[:-2]
    nl = len(lead)
    Lq, Lk = q.shape[-2], k.shape[-2]
    split = lambda x, L: ag.reshape(x, lead + (L, n_heads, hd))
    order = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    qh = ag.transpose(split(q, Lq), order)
    kh = ag.transpose(split(k, Lk), tuple(range(nl)) + (nl + 1, nl + 2, nl))
    vh = ag.transpose(split(v, Lk), order)
    weights = ag.softmax(ag.scale(ag.matmul(qh, kh), 1.0 / math.sqrt(hd)))
    heads = ag.matmul(weights, vh)
    out = ag.reshape(ag.transpose(heads, order), lead + (Lq, d))
    if w_out is not None:
        out = ag.linear(out, w_out, b_out)
    return out, weights


@dataclass
class Reconstructions:
    """Outputs of one forward call, all shaped like the input window."""

    outputs: dict
    focus: np.ndarray | None = None

    def __getitem__(self, key):
        return self.outputs[key]

    def pathway(self) -> tuple[Tensor, Tensor]:
        """``(R1, R2)`` pair feeding the anomaly score.

        Two-phase models pair the first-pass output with decoder 1's
        focus-conditioned output; decoder 2 is the adversary and its output
        is not a reconstruction.
        """
        if "adv1" in self.outputs:
            return self.outputs["initial"], self.outputs["adv1"]
        o = self.outputs["output"]
        return o, o


class AnomalyModel:
    def __init__(self, genome: Genome, n_features: int, seed: int = 0):
        if n_features < 1:
            raise ContractError("n_features must be >= 1")
        self.genome = genome.bind(n_features)
        self.m = n_features
        self.d_model = 2 * n_features
        self.n_heads = n_features
        self.seed = int(seed)
        g = self.genome
        self.cond_channel = g.self_conditioning
        self.in_channels = 2 * self.m if self.cond_channel else self.m
        self.n_decoders = 2 if g.phase_type == "2phase" else 1
        self.activation = ag.ACTIVATIONS[g.activation]
        self.training = False
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(self.seed)
        self._pe_cache: dict[int, np.ndarray] = {}
        self._build()
        del self._rng

    # ----------------------------------------------------------- construction

    def _dense(self, name, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[f"{name}.w"] = Tensor(
            self._rng.uniform(-limit, limit, size=(fan_in, fan_out)), True, f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    def _norm(self, name, width):
        self.params[f"{name}.gain"] = Tensor(np.ones(width), True, f"{name}.gain")
        self.params[f"{name}.shift"] = Tensor(np.zeros(width), True, f"{name}.shift")
        if self.genome.norm_type == "batch":
            self.buffers[f"{name}.running_mean"] = np.zeros(width)
            self.buffers[f"{name}.running_var"] = np.ones(width)

    def _attn(self, name):
        for part in ("q", "k", "v", "o"):
            self._dense(f"{name}.{part}", self.d_model, self.d_model)

    def _ffn(self, name):
        d, F, L = self.d_model, self.genome.dim_feedforward, self.genome.ffn_layers
        self._dense(f"{name}.0", d, F)
        for i in range(1, L):
            self._dense(f"{name}.{i}", F, F)
        self._dense(f"{name}.out", F, d)

    def _build(self):
        g, d = self.genome, self.d_model
        if g.use_linear_embedding:
            self._dense("embed", self.in_channels, d)
        self._norm("input_norm", d)
        for i in range(g.encoder_layers):
            self._attn(f"enc{i}.attn")
            self._norm(f"enc{i}.norm1", d)
            self._ffn(f"enc{i}.ffn")
            self._norm(f"enc{i}.norm2", d)
        for j in range(self.n_decoders):
            for i in range(g.decoder_layers):
                p = f"dec{j}.{i}"
                self._attn(f"{p}.self_attn")
                self._norm(f"{p}.norm1", d)
                self._attn(f"{p}.cross_attn")
                self._norm(f"{p}.norm2", d)
                self._ffn(f"{p}.ffn")
                self._norm(f"{p}.norm3", d)
            self._dense(f"dec{j}.out", d, self.m)

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self, mode: bool = True) -> "AnomalyModel":
        self.training = mode
        return self

    def eval(self) -> "AnomalyModel":
        return self.train(False)

    # ---------------------------------------------------------------- layers

    def _p(self, name):
        return self.params[name]

    def _apply_norm(self, name, x: Tensor) -> Tensor:
        kind = self.genome.norm_type
        if kind == "layer":
            z = ag.standardize(x, (-1,))
        elif kind == "instance":
            z = ag.standardize(x, (1,))
        elif self.training:
            z = ag.standardize(x, (0, 1))
            flat = x.data.reshape(-1, x.shape[-1])
            rm, rv = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * flat.mean(axis=0)
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * flat.var(axis=0)
        else:
            rm, rv = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
            inv = 1.0 / np.sqrt(rv + ag.NORM_EPS)
            z = ag.affine(x, Tensor(inv), Tensor(-rm * inv))
        return ag.affine(z, self._p(f"{name}.gain"), self._p(f"{name}.shift"))

    def _dropout(self, x, rng):
        return ag.dropout(x, self.genome.dropout, rng, self.training)

    def _mha(self, name, x_q, x_kv, rng):
        q = ag.linear(x_q, self._p(f"{name}.q.w"), self._p(f"{name}.q.b"))
        k = ag.linear(x_kv, self._p(f"{name}.k.w"), self._p(f"{name}.k.b"))
        v = ag.linear(x_kv, self._p(f"{name}.v.w"), self._p(f"{name}.v.b"))
        out, _ = multi_head_attention(q, k, v, self.n_heads,
                                      self._p(f"{name}.o.w"), self._p(f"{name}.o.b"))
        return self._dropout(out, rng)

    def _ffn_apply(self, name, x, rng):
        h = x
        for i in range(self.genome.ffn_layers):
            h = self._dropout(self.activation(
                ag.linear(h, self._p(f"{name}.{i}.w"), self._p(f"{name}.{i}.b"))), rng)
        return self._dropout(ag.linear(h, self._p(f"{name}.out.w"), self._p(f"{name}.out.b")), rng)

    def _pe(self, K):
        if K not in self._pe_cache:
            self._pe_cache[K] = positional_encoding(
                self.genome.pos_encoding, K, self.d_model, seed=self.seed + 7919)
        return self._pe_cache[K]

    # --------------------------------------------------------------- forward

    def _check(self, x):
        if x.ndim != 3 or x.shape[-1] != self.m:
            raise DimensionError(f"expected windows shaped (B, K, {self.m}), got {x.shape}")

    def encode(self, window, condition=None, rng=None) -> tuple[Tensor, Tensor]:
        """Return ``(target, memory)``: the embedded input and the encoder output."""
        x = ag.as_tensor(window)
        self._check(x)
        if condition is not None:
            condition = ag.as_tensor(condition)
            if condition.shape != x.shape:
                raise DimensionError(f"condition {condition.shape} vs window {x.shape}")
        if self.cond_channel:
            c = condition if condition is not None else Tensor(np.zeros(x.shape))
            h = ag.concat([x, c], axis=-1)
        else:
            h = x if condition is None else ag.add(x, condition)
        if self.genome.use_linear_embedding:
            h = ag.linear(h, self._p("embed.w"), self._p("embed.b"))
        elif not self.cond_channel:
            h = ag.concat([h, h], axis=-1)
        h = self._apply_norm("input_norm", h)
        tgt = ag.add(h, Tensor(np.broadcast_to(self._pe(x.shape[1]), h.shape)))
        mem = tgt
        for i in range(self.genome.encoder_layers):
            mem = self._apply_norm(f"enc{i}.norm1", ag.add(mem, self._mha(f"enc{i}.attn", mem, mem, rng)))
            mem = self._apply_norm(f"enc{i}.norm2", ag.add(mem, self._ffn_apply(f"enc{i}.ffn", mem, rng)))
        return tgt, mem

    def decode(self, tgt: Tensor, memory: Tensor, which: int = 0, rng=None) -> Tensor:
        t = tgt
        for i in range(self.genome.decoder_layers):
            p = f"dec{which}.{i}"
            t = self._apply_norm(f"{p}.norm1", ag.add(t, self._mha(f"{p}.self_attn", t, t, rng)))
            t = self._apply_norm(f"{p}.norm2", ag.add(t, self._mha(f"{p}.cross_attn", t, memory, rng)))
            t = self._apply_norm(f"{p}.norm3", ag.add(t, self._ffn_apply(f"{p}.ffn", t, rng)))
        return ag.sigmoid(ag.linear(t, self._p(f"dec{which}.out.w"), self._p(f"dec{which}.out.b")))

    def step(self, window, condition=None, which: int = 0, rng=None) -> Tensor:
        """One reconstruction pass through a single decoder."""
        tgt, mem = self.encode(window, condition, rng)
        return self.decode(tgt, mem, which, rng)

    def forward(self, window, condition=None, rng=None,
                second_initial: bool = False) -> Reconstructions:
        """Phase-dependent reconstructions of a ``(B, K, m)`` batch.

        ``1phase`` returns ``output``; with self-conditioning it first runs a
        zero-conditioned pass and feeds that pass's squared deviation back in.
        ``2phase`` returns ``initial`` (zero condition), then ``adv1`` and
        ``adv2`` conditioned on the focus score ``(initial - W)**2``.
        ``iterative`` returns a single ``output`` for the given condition; the
        refinement loop belongs to the caller. ``second_initial`` adds
        decoder 2's zero-condition output as ``initial2`` (two-phase training).
        """
        W = ag.as_tensor(window)
        self._check(W)
        phase = self.genome.phase_type
        if phase == "2phase":
            tgt, mem = self.encode(W, None, rng)
            out = {"initial": self.decode(tgt, mem, 0, rng)}
            if second_initial:
                out["initial2"] = self.decode(tgt, mem, 1, rng)
            focus = ag.square(ag.sub(out["initial"], W))
            tgt, mem = self.encode(W, focus, rng)
            out["adv1"] = self.decode(tgt, mem, 0, rng)
            out["adv2"] = self.decode(tgt, mem, 1, rng)
            return Reconstructions(out, focus=focus.data)
        if phase == "1phase" and self.cond_channel and condition is None:
            first = self.step(W, None, 0, rng)
            focus = ag.square(ag.sub(first, W))
            return Reconstructions({"output": self.step(W, focus, 0, rng)}, focus=focus.data)
        return Reconstructions({"output": self.step(W, condition, 0, rng)})

    __call__ = forward

    # ------------------------------------------------------------ checkpoint

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(k, p.data) for k, p in self.params.items()] + [
            (f"buffer:{k}", v) for k, v in self.buffers.items()]

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        gj = self.genome.to_json().encode("utf-8")
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        out.write(struct.pack("<I", len(gj)))
        out.write(gj)
        out.write(struct.pack("<IQ", self.m, self.seed))
        state = self.state()
        out.write(struct.pack("<I", len(state)))
        for name, arr in state:
            nb = name.encode("utf-8")
            out.write(struct.pack("<H", len(nb)))
            out.write(nb)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, source="<bytes>") -> "AnomalyModel":
        buf = io.BytesIO(blob)

        def read(fmt):
            size = struct.calcsize(fmt)
            chunk = buf.read(size)
            if len(chunk) != size:
                raise ParseError("truncated checkpoint", path=source)
            return struct.unpack(fmt, chunk)

        if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ParseError("not a model checkpoint (bad magic bytes)", path=source)
        (version,) = read("<I")
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path=source)
        (glen,) = read("<I")
        genome = Genome.from_json(buf.read(glen).decode("utf-8"))
        m, seed = read("<IQ")
        model = cls(genome, m, seed)
        (count,) = read("<I")
        for _ in range(count):
            (nlen,) = read("<H")
            name = buf.read(nlen).decode("utf-8")
            (ndim,) = read("<B")
            shape = read(f"<{ndim}I")
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith("buffer:"):
                target = model.buffers.get(name[7:])
                if target is None or target.shape != arr.shape:
                    raise ParseError(f"unexpected buffer {name}", path=source)
                target[...] = arr
            else:
                p = model.params.get(name)
                if p is None or p.shape != arr.shape:
                    raise ParseError(f"unexpected tensor {name} {shape}", path=source)
                p.data = arr.copy()
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AnomalyModel":
        path = Path(path)
        if not path.exists():
            raise ParseError("checkpoint not found", path=path)
        return cls.from_bytes(path.read_bytes(), source=path)


def build(genome: Genome, n_features: int, seed: int = 0) -> AnomalyModel:
    return AnomalyModel(genome, n_features, seed)


def parameter_count_formula(genome: Genome, n_features: int) -> int:
    m, d = n_features, 2 * n_features
    F, L = genome.dim_feedforward, genome.ffn_layers
    c = 2 * m if genome.self_conditioning else m
    norm = 2 * d
    attn = 4 * (d * d + d)
    ffn = (d * F + F) + (L - 1) * (F * F + F) + (F * d + d)
    enc = attn + ffn + 2 * norm
    dec = 2 * attn + ffn + 3 * norm
    n_dec = 2 if genome.phase_type == "2phase" else 1
    emb = c * d + d if genome.use_linear_embedding else 0
    return emb + norm + genome.encoder_layers * enc + n_dec * (genome.decoder_layers * dec + d * m + m)
