"""Small trainable language model built from diagonal selective-SSM blocks.

Architecture: token embedding -> L pre-norm residual blocks -> RMS norm ->
linear readout. Each block normalizes its input, runs the selective scan
(the normalized vector both conditions the per-step dynamics and drives the
per-channel states), optionally applies a multiplicative silu gate, and
projects back to the residual stream.

Gradients are computed by a hand-written reverse pass over this fixed
architecture (no autodiff graph), in float64 throughout, which keeps the
gradient checks exact enough for finite-difference verification and gives
the calibration routines exact derivatives with respect to the a/delta
scaling hooks of frozen models.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .scan import (
    ScanOverflowError,
    SsmLayerParams,
    layer_signals,
    scan_backward,
    scan_core,
    signals_backward,
    sigmoid,
)

CHECKPOINT_MAGIC = b"SSMX"
CHECKPOINT_VERSION = 1
RMS_EPS = 1e-6


class TrainDivergedError(RuntimeError):
    """Training loss stayed above 10x its initial value for too long."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass
class ToyModelConfig:
    vocab_size: int = 256
    d_m: int = 128
    d_h: int = 16
    n_layers: int = 4
    variant: str = "mamba"
    heads: int | None = None
    train_length: int = 256
    gated: bool = False
    seed: int = 0
    a_init_range: tuple[float, float] = (0.05, 8.0)
    delta_init_range: tuple[float, float] = (0.01, 0.1)
    # With train_dynamics off, the transition diagonal and the step-size
    # projection stay at their initialization (gradients still flow to
    # everything else), mimicking a pretrained backbone whose dynamics the
    # experiments probe rather than reshape.
    train_dynamics: bool = True

    def __post_init__(self):
        self.a_init_range = tuple(float(v) for v in self.a_init_range)
        self.delta_init_range = tuple(float(v) for v in self.delta_init_range)
        if min(self.vocab_size, self.d_m, self.d_h, self.n_layers) < 1:
            raise ValueError("vocab_size, d_m, d_h and n_layers must be positive")
        if self.train_length < 32:
            raise ValueError("train_length must be at least 32")
        if self.variant == "mamba2":
            if self.heads is None or self.heads < 1 or self.d_h % self.heads:
                raise ValueError("mamba2 needs heads dividing d_h")
        elif self.variant == "mamba":
            if self.heads is not None:
                raise ValueError("heads only applies to the mamba2 variant")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class ToyModel:
    cfg: ToyModelConfig
    params: dict[str, np.ndarray]
    train_steps: int = 0
    final_loss: float | None = None

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def a_diag(self, i: int) -> np.ndarray:
        log_a = self.params[f"layers.{i}.log_a"]
        a = np.exp(log_a)
        if self.cfg.variant == "mamba2":
            a = np.repeat(a, self.cfg.d_h // self.cfg.heads)
        return a

    def layer_view(self, i: int) -> SsmLayerParams:
        """Read-only SsmLayerParams view over one block's scan parameters."""
        return SsmLayerParams(
            a_diag=self.a_diag(i),
            w_delta=self.params[f"layers.{i}.w_delta"],
            b_delta=self.params[f"layers.{i}.b_delta"],
            w_b=self.params[f"layers.{i}.w_b"],
            w_c=self.params[f"layers.{i}.w_c"],
            variant=self.cfg.variant,
            heads=self.cfg.heads,
        )

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


def build_model(cfg: ToyModelConfig) -> ToyModel:
    """Deterministically initialize a model from its config seed.

    The transition diagonal is log-spaced across a_init_range so every layer
    starts with a mix of slow (lambda near 1) and fast (lambda near 0)
    channels; the delta bias is set so the step sizes at zero input fall
    log-uniformly inside delta_init_range.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    d_m, d_h, v = cfg.d_m, cfg.d_h, cfg.vocab_size
    scale = d_m ** -0.5
    params: dict[str, np.ndarray] = {}
    params["embed"] = rng.normal(0.0, scale, (v, d_m))
    n_a = cfg.heads if cfg.variant == "mamba2" else d_h
    a_lo, a_hi = cfg.a_init_range
    for i in range(cfg.n_layers):
        params[f"layers.{i}.log_a"] = np.log(np.geomspace(a_lo, a_hi, n_a))
        params[f"layers.{i}.w_delta"] = rng.normal(0.0, 0.25 * scale, (d_h, d_m))
        lo, hi = cfg.delta_init_range
        targets = 10.0 ** rng.uniform(math.log10(lo), math.log10(hi), d_h)
        params[f"layers.{i}.b_delta"] = np.log(np.expm1(targets))
        params[f"layers.{i}.w_b"] = rng.normal(0.0, scale, (d_h, d_m))
        params[f"layers.{i}.w_c"] = rng.normal(0.0, scale, (d_h, d_m))
        params[f"layers.{i}.norm_g"] = np.ones(d_m)
        params[f"layers.{i}.w_out"] = rng.normal(0.0, scale, (d_m, d_m))
        if cfg.gated:
            params[f"layers.{i}.w_gate"] = rng.normal(0.0, scale, (d_m, d_m))
    params["final_norm_g"] = np.ones(d_m)
    params["lm_head"] = rng.normal(0.0, scale, (v, d_m))
    return ToyModel(cfg=cfg, params=params)


def _rmsnorm(x: np.ndarray, g: np.ndarray):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xn = x / r
    return xn * g, xn, r


def _rmsnorm_backward(dz, xn, r, g):
    u = dz * g
    dx = (u - xn * np.mean(u * xn, axis=-1, keepdims=True)) / r
    dg = (dz * xn).reshape(-1, g.shape[0]).sum(axis=0)
    return dx, dg


def _silu(q):
    s = sigmoid(q)
    return q * s, s


def _resolve_layer_scales(model: ToyModel, scales, i: int):
    if scales is None:
        return None, None
    a_s, d_s = scales[i]
    return a_s, d_s


def forward_batch(
    model: ToyModel,
    tokens: np.ndarray,
    scales=None,
    collect: str = "none",
) -> dict:
    """Forward pass over a (B, L) batch of token ids.

    scales, when given, is a per-layer list of (a_scale, delta_scale) hook
    values accepted by the discretization. collect selects extra outputs:
    "norms" records per-layer state-norm traces (B, L, d_m); "cache" keeps
    everything the reverse pass needs.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (B, L) batch")
    if tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size:
        raise ValueError("token id outside the vocabulary")
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(model, tokens, scales, collect)


def _forward_impl(model: ToyModel, tokens: np.ndarray, scales, collect: str) -> dict:
    cfg = model.cfg
    p = model.params
    x = p["embed"][tokens]
    want_cache = collect == "cache"
    want_norms = collect in ("norms", "cache")
    caches: list[dict] | None = [] if want_cache else None
    norms_out: list[np.ndarray] | None = [] if want_norms else None
    for i in range(cfg.n_layers):
        view = model.layer_view(i)
        a_s, d_s = _resolve_layer_scales(model, scales, i)
        z, xn, r = _rmsnorm(x, p[f"layers.{i}.norm_g"])
        sig = layer_signals(view, z, a_s, d_s, keep_cache=want_cache)
        res = scan_core(
            sig["a_bar"], sig["b_bar"], sig["cvec"], z,
            collect_states=want_cache, collect_norms=want_norms,
        )
        ys = res["ys"]
        if cfg.gated:
            gate_pre = z @ p[f"layers.{i}.w_gate"].T
            gate_act, gate_sig = _silu(gate_pre)
            y_mixed = ys * gate_act
        else:
            gate_pre = gate_act = gate_sig = None
            y_mixed = ys
        out = y_mixed @ p[f"layers.{i}.w_out"].T
        if want_norms:
            norms_out.append(res["norms"])
        if want_cache:
            caches.append({
                "z": z, "xn": xn, "r": r, "sig": sig, "states": res["states"],
                "ys": ys, "gate_pre": gate_pre, "gate_act": gate_act,
                "gate_sig": gate_sig, "y_mixed": y_mixed, "view": view,
            })
        x = x + out
    zf, xnf, rf = _rmsnorm(x, p["final_norm_g"])
    logits = zf @ p["lm_head"].T
    out = {"logits": logits, "norms": norms_out}
    if want_cache:
        out.update({"caches": caches, "tokens": tokens,
                    "final": {"zf": zf, "xn": xnf, "r": rf}})
    return out


def forward(model: ToyModel, tokens: np.ndarray, scales=None):
    """Causal logits and per-layer state-norm traces for one sequence.

    Returns (logits (L, vocab), [norm trace (L, d_m) per layer]). Raises
    ScanOverflowError naming the layer and step if a state stops being
    finite.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-d sequence")
    res = forward_batch(model, tokens[None], scales=scales, collect="norms")
    norms = []
    for layer_idx, tr in enumerate(res["norms"]):
        if not np.all(np.isfinite(tr)):
            bad = np.argwhere(~np.isfinite(tr[0]))
            raise ScanOverflowError(step=int(bad[0][0]), layer=layer_idx)
        norms.append(tr[0])
    return res["logits"][0], norms


def cross_entropy(
    logits: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    want_grad: bool = False,
):
    """Mean next-token cross entropy in nats, optionally with dlogits."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _cross_entropy_impl(logits, targets, mask, want_grad)


def _cross_entropy_impl(logits, targets, mask, want_grad):
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    if mask is None:
        n = nll.size
        loss = float(np.sum(nll)) / n
    else:
        n = int(np.sum(mask))
        if n == 0:
            raise ValueError("loss mask selects no positions")
        loss = float(np.sum(nll * mask)) / n
    if not want_grad:
        return loss, None
    probs = np.exp(z - lse[..., None])
    dlogits = probs
    np.subtract.at(
        dlogits.reshape(-1, dlogits.shape[-1]),
        (np.arange(targets.size), targets.reshape(-1)),
        1.0,
    )
    if mask is not None:
        dlogits *= mask[..., None]
    dlogits /= n
    return loss, dlogits


def loss_and_grads(
    model: ToyModel,
    tokens: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    scales=None,
    want_param_grads: bool = True,
    want_scale_grads: bool = False,
):
    """Cross-entropy loss with hand-derived gradients.

    Returns (loss, param_grads, scale_grads) where scale_grads is a per-layer
    list of dicts holding per-channel dLoss/d(a_scale) and
    dLoss/d(delta_scale) at the evaluated hook values.
    """
    cfg = model.cfg
    p = model.params
    res = forward_batch(model, tokens, scales=scales, collect="cache")
    loss, dlogits = cross_entropy(res["logits"], targets, mask, want_grad=True)
    grads = {k: np.zeros_like(v) for k, v in p.items()} if want_param_grads else {}
    scale_grads: list[dict] = []

    fin = res["final"]
    d_zf = dlogits @ p["lm_head"]
    if want_param_grads:
        grads["lm_head"] = np.einsum("blv,blm->vm", dlogits, fin["zf"])
    dx, dg = _rmsnorm_backward(d_zf, fin["xn"], fin["r"], p["final_norm_g"])
    if want_param_grads:
        grads["final_norm_g"] = dg

    for i in range(cfg.n_layers - 1, -1, -1):
        cache = res["caches"][i]
        view: SsmLayerParams = cache["view"]
        d_out = dx
        w_out = p[f"layers.{i}.w_out"]
        d_y_mixed = d_out @ w_out
        if want_param_grads:
            grads[f"layers.{i}.w_out"] = np.einsum(
                "blj,blk->jk", d_out, cache["y_mixed"]
            )
        if cfg.gated:
            d_ys = d_y_mixed * cache["gate_act"]
            d_gate_act = d_y_mixed * cache["ys"]
            gs = cache["gate_sig"]
            d_gate_pre = d_gate_act * (gs * (1.0 + cache["gate_pre"] * (1.0 - gs)))
            dz_gate = d_gate_pre @ p[f"layers.{i}.w_gate"]
            if want_param_grads:
                grads[f"layers.{i}.w_gate"] = np.einsum(
                    "blj,blk->jk", d_gate_pre, cache["z"]
                )
        else:
            d_ys = d_y_mixed
            dz_gate = 0.0
        sig = cache["sig"]
        sb = scan_backward(
            d_ys, sig["a_bar"], sig["b_bar"], sig["cvec"], cache["z"], cache["states"]
        )
        chain = signals_backward(sb, sig, cache["z"], view)
        if want_scale_grads:
            scale_grads.append(
                {"a_scale": chain["d_a_scale"], "delta_scale": chain["d_delta_scale"]}
            )
        if want_param_grads:
            grads[f"layers.{i}.w_delta"] = chain["d_w_delta"]
            grads[f"layers.{i}.b_delta"] = chain["d_b_delta"]
            grads[f"layers.{i}.w_b"] = chain["d_w_b"]
            grads[f"layers.{i}.w_c"] = chain["d_w_c"]
            d_a = chain["d_a_diag"] * view.a_diag  # chain through a = exp(log_a)
            if cfg.variant == "mamba2":
                d_a = d_a.reshape(cfg.heads, -1).sum(axis=1)
            grads[f"layers.{i}.log_a"] = d_a
        dz = chain["d_xs"] + sb["d_drive"] + dz_gate
        dx_block, dg = _rmsnorm_backward(dz, cache["xn"], cache["r"],
                                         p[f"layers.{i}.norm_g"])
        if want_param_grads:
            grads[f"layers.{i}.norm_g"] = dg
        dx = dx + dx_block

    if want_param_grads:
        d_embed = grads["embed"]
        np.add.at(d_embed, res["tokens"].reshape(-1), dx.reshape(-1, cfg.d_m))
    scale_grads.reverse()
    return loss, grads, scale_grads


def train(
    model: ToyModel,
    batch_fn: Callable[[int], tuple[np.ndarray, np.ndarray, np.ndarray | None]],
    steps: int,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    scales=None,
    log_every: int = 0,
) -> np.ndarray:
    """Adam training loop over batches served by batch_fn(step).

    batch_fn must be a pure function of the step index so fixed seeds give
    identical trajectories. Mutates the model in place and returns the loss
    curve. Aborts if the loss exceeds 10x its initial value for more than
    100 consecutive steps or a gradient stops being finite.
    """
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    frozen = ()
    if not model.cfg.train_dynamics:
        frozen = (".log_a", ".w_delta", ".b_delta")
    curve = np.empty(steps)
    initial_loss = None
    bad_streak = 0
    b1, b2 = betas
    for step in range(steps):
        inputs, targets, mask = batch_fn(step)
        try:
            loss, grads, _ = loss_and_grads(model, inputs, targets, mask, scales=scales)
        except (ValueError, FloatingPointError) as exc:
            if step == 0:
                raise
            raise TrainDivergedError(
                f"model state became invalid at step {step}: {exc}"
            ) from exc
        curve[step] = loss
        if initial_loss is None:
            initial_loss = loss
        if not math.isfinite(loss) or loss > 10.0 * initial_loss:
            bad_streak += 1
            if bad_streak > 100:
                raise TrainDivergedError(
                    f"loss {loss:.4g} above 10x initial {initial_loss:.4g} "
                    f"for {bad_streak} steps (step {step})"
                )
        else:
            bad_streak = 0
        t = step + 1
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainDivergedError(f"non-finite gradient for {k} at step {step}")
            if any(k.endswith(suffix) for suffix in frozen):
                continue
            m_state[k] = b1 * m_state[k] + (1 - b1) * g
            v_state[k] = b2 * v_state[k] + (1 - b2) * g * g
            m_hat = m_state[k] / (1 - b1**t)
            v_hat = v_state[k] / (1 - b2**t)
            model.params[k] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(curve[max(0, step - log_every + 1):step + 1]))
            print(f"step {step + 1:>6}/{steps} loss {recent:.4f}")
    model.train_steps += steps
    model.final_loss = float(curve[-1]) if steps else model.final_loss
    return curve


def sequence_loss(
    model: ToyModel,
    tokens: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    scales=None,
) -> float:
    """Forward-only mean cross entropy for a (B, L) batch."""
    res = forward_batch(model, tokens, scales=scales)
    loss, _ = cross_entropy(res["logits"], targets, mask)
    return loss


def perplexity_by_length(
    model: ToyModel,
    corpus: np.ndarray,
    lengths: Sequence[int],
    scales=None,
    max_windows: int = 8,
    batch_size: int = 8,
) -> list[tuple[int, float]]:
    """Perplexity over non-overlapping windows of each requested length.

    Windows are taken from the front of the corpus; every length must fit at
    least one full window. Returns [(length, ppl), ...] with ppl =
    exp(mean cross entropy per predicted token).
    """
    corpus = np.asarray(corpus)
    lengths = [int(x) for x in lengths]
    if any(b < a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be ascending")
    table: list[tuple[int, float]] = []
    for length in lengths:
        n_windows = corpus.shape[0] // length
        if n_windows < 1:
            raise ValueError(
                f"corpus has {corpus.shape[0]} tokens but a window of length "
                f"{length} requires at least {length} tokens"
            )
        n_windows = min(n_windows, max_windows)
        windows = corpus[: n_windows * length].reshape(n_windows, length)
        total_nll = 0.0
        total_count = 0
        for start in range(0, n_windows, batch_size):
            chunk = windows[start:start + batch_size]
            loss = sequence_loss(model, chunk[:, :-1], chunk[:, 1:], scales=scales)
            count = chunk.shape[0] * (length - 1)
            total_nll += loss * count
            total_count += count
        table.append((length, float(math.exp(total_nll / total_count))))
    return table


def decode_greedy(
    model: ToyModel,
    prompts: np.ndarray,
    n_steps: int,
    scales=None,
) -> np.ndarray:
    """Greedy continuation of a (B, L) prompt batch for n_steps tokens."""
    seq = np.asarray(prompts).copy()
    out = np.empty((seq.shape[0], n_steps), dtype=seq.dtype)
    for k in range(n_steps):
        res = forward_batch(model, seq, scales=scales)
        nxt = np.argmax(res["logits"][:, -1, :], axis=-1).astype(seq.dtype)
        out[:, k] = nxt
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def model_checksum(model: ToyModel) -> str:
    """SHA-256 over the config and every parameter tensor, order-independent."""
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.cfg), sort_keys=True).encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].tobytes())
    return h.hexdigest()


def save_checkpoint(model: ToyModel, path) -> None:
    """Write a self-describing binary checkpoint.

    Wire format: magic SSMX, version (u32 LE), length-prefixed UTF-8 JSON
    header (config, step count, final loss), tensor count (u32), then one
    record per tensor: length-prefixed name, u8 rank, u32 dims, and the
    row-major float64 data.
    """
    names = sorted(model.params)
    header = {
        "config": asdict(model.cfg),
        "train_steps": model.train_steps,
        "final_loss": model.final_loss,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        raw_name = n.encode()
        arr = np.ascontiguousarray(model.params[n], dtype="<f8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        chunk = self.data[self.offset:self.offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"{self.path}: truncated checkpoint ({what})")
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ToyModel:
    """Load a checkpoint written by save_checkpoint; round trips bitwise."""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    version, header_len = reader.unpack("<II", "header size")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        header = json.loads(reader.take(header_len, "header").decode())
        cfg_dict = dict(header["config"])
        for key in ("a_init_range", "delta_init_range"):
            if key in cfg_dict:
                cfg_dict[key] = tuple(cfg_dict[key])
        if cfg_dict.get("heads") is not None:
            cfg_dict["heads"] = int(cfg_dict["heads"])
        cfg = ToyModelConfig(**cfg_dict)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    (count,) = reader.unpack("<I", "tensor count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name")
        name = reader.take(name_len, "tensor name").decode()
        (ndim,) = reader.unpack("<B", f"{name} rank")
        shape = reader.unpack(f"<{ndim}I", f"{name} dims") if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
        chunk = reader.take(nbytes, f"{name} data")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return ToyModel(
        cfg=cfg,
        params=params,
        train_steps=int(header["train_steps"]),
        final_loss=header["final_loss"],
    )
