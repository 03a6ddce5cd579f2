"""GRU encoder-decoder with a two-slot attention, trained by hand-derived backprop.

The encoder reads the environment tokens; the decoder starts from a projection
of [h_n | N | mask | emb(o)] and at every step attends over the two-slot memory
{s_0, s_prev} before its GRU update. Everything is float64 numpy, so gradients
are reproducible and checkable against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import END_ID, PAD_ID, START_ID, FeatureVector, Vocabulary

INIT_SCALE = 0.08

PARAM_NAMES = (
    "emb",
    "enc_wz", "enc_uz", "enc_bz",
    "enc_wr", "enc_ur", "enc_br",
    "enc_wh", "enc_uh", "enc_bh",
    "s0_w", "s0_b",
    "att_wq", "att_wm", "att_ba", "att_v",
    "dec_wz", "dec_uz", "dec_bz",
    "dec_wr", "dec_ur", "dec_br",
    "dec_wh", "dec_uh", "dec_bh",
    "out_w", "out_b",
)


class NumericError(RuntimeError):
    """A non-finite value appeared; the message names the parameter block."""


@dataclass(frozen=True)
class TrainingExample:
    features: FeatureVector
    target: tuple  # token ids, ending in END

    def __post_init__(self):
        if len(self.target) < 1 or self.target[-1] != END_ID:
            raise ValueError("target must be a non-empty token sequence ending in END")


@dataclass
class ModelParams:
    vocab_size: int
    emb_dim: int
    enc_hidden: int
    dec_hidden: int
    attn_dim: int
    n_features: int
    seed: int
    emb: np.ndarray = field(repr=False, default=None)
    enc_wz: np.ndarray = field(repr=False, default=None)
    enc_uz: np.ndarray = field(repr=False, default=None)
    enc_bz: np.ndarray = field(repr=False, default=None)
    enc_wr: np.ndarray = field(repr=False, default=None)
    enc_ur: np.ndarray = field(repr=False, default=None)
    enc_br: np.ndarray = field(repr=False, default=None)
    enc_wh: np.ndarray = field(repr=False, default=None)
    enc_uh: np.ndarray = field(repr=False, default=None)
    enc_bh: np.ndarray = field(repr=False, default=None)
    s0_w: np.ndarray = field(repr=False, default=None)
    s0_b: np.ndarray = field(repr=False, default=None)
    att_wq: np.ndarray = field(repr=False, default=None)
    att_wm: np.ndarray = field(repr=False, default=None)
    att_ba: np.ndarray = field(repr=False, default=None)
    att_v: np.ndarray = field(repr=False, default=None)
    dec_wz: np.ndarray = field(repr=False, default=None)
    dec_uz: np.ndarray = field(repr=False, default=None)
    dec_bz: np.ndarray = field(repr=False, default=None)
    dec_wr: np.ndarray = field(repr=False, default=None)
    dec_ur: np.ndarray = field(repr=False, default=None)
    dec_br: np.ndarray = field(repr=False, default=None)
    dec_wh: np.ndarray = field(repr=False, default=None)
    dec_uh: np.ndarray = field(repr=False, default=None)
    dec_bh: np.ndarray = field(repr=False, default=None)
    out_w: np.ndarray = field(repr=False, default=None)
    out_b: np.ndarray = field(repr=False, default=None)

    @property
    def s0_input_dim(self) -> int:
        # [h_n | N | validity mask | emb(o)]; the mask doubles the feature width
        return self.enc_hidden + 2 * self.n_features + self.emb_dim

    @property
    def dec_input_dim(self) -> int:
        return self.emb_dim + self.dec_hidden

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, arrays: dict) -> "ModelParams":
        return replace(self, **arrays)

    def copy(self) -> "ModelParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


def param_shapes(p: ModelParams) -> dict:
    e, he, hd, a, v = p.emb_dim, p.enc_hidden, p.dec_hidden, p.attn_dim, p.vocab_size
    din = p.dec_input_dim
    shapes = {"emb": (v, e), "s0_w": (hd, p.s0_input_dim), "s0_b": (hd,),
              "att_wq": (a, hd), "att_wm": (a, hd), "att_ba": (a,), "att_v": (a,),
              "out_w": (v, hd), "out_b": (v,)}
    for gate in "zrh":
        shapes[f"enc_w{gate}"] = (he, e)
        shapes[f"enc_u{gate}"] = (he, he)
        shapes[f"enc_b{gate}"] = (he,)
        shapes[f"dec_w{gate}"] = (hd, din)
        shapes[f"dec_u{gate}"] = (hd, hd)
        shapes[f"dec_b{gate}"] = (hd,)
    return shapes


def init_params(
    vocab_size: int,
    seed: int,
    emb_dim: int = 16,
    enc_hidden: int = 20,
    dec_hidden: int = 49,
    attn_dim: int = 20,
    n_features: int = 21,
) -> ModelParams:
    """Seeded initialization: weights uniform in [-0.08, 0.08], biases zero."""
    if vocab_size < 5:
        raise ValueError("vocab must cover at least the specials plus one word")
    p = ModelParams(vocab_size, emb_dim, enc_hidden, dec_hidden, attn_dim, n_features, seed)
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(p).items():
        if name.endswith(("_bz", "_br", "_bh")) or name in ("s0_b", "att_ba", "out_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return p.with_arrays(arrays)


# --- batched forward/backward ----------------------------------------------

@dataclass
class Batch:
    X: np.ndarray        # (B, L) int64 encoder tokens
    o: np.ndarray        # (B,) int64 target-object tokens
    N: np.ndarray        # (B, F)
    mask: np.ndarray     # (B, F)
    targets: np.ndarray  # (B, T) int64, PAD-padded
    tmask: np.ndarray    # (B, T) float64, 1 on real target positions


def make_batch(examples: list) -> Batch:
    xs = np.stack([ex.features.X for ex in examples])
    os_ = np.array([ex.features.o for ex in examples], dtype=np.int64)
    ns = np.stack([ex.features.N for ex in examples])
    masks = np.stack([ex.features.mask for ex in examples])
    tmax = max(len(ex.target) for ex in examples)
    targets = np.full((len(examples), tmax), PAD_ID, dtype=np.int64)
    tmask = np.zeros((len(examples), tmax))
    for i, ex in enumerate(examples):
        targets[i, : len(ex.target)] = ex.target
        tmask[i, : len(ex.target)] = 1.0
    return Batch(xs, os_, ns, masks, targets, tmask)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gru_step(x, h, w, u, b_, wz, uz, bz, wr, ur, br):
    """One GRU step; returns the new state and the gate cache."""
    z = _sigmoid(x @ wz.T + h @ uz.T + bz)
    r = _sigmoid(x @ wr.T + h @ ur.T + br)
    g = np.tanh(x @ w.T + (r * h) @ u.T + b_)
    h_new = (1.0 - z) * h + z * g
    return h_new, (x, h, z, r, g)


def _gru_backward(dh_new, cache, w, u, wz, uz, wr, ur, grads, prefix):
    x, h, z, r, g = cache
    dz = dh_new * (g - h)
    dg = dh_new * z
    dh = dh_new * (1.0 - z)
    dag = dg * (1.0 - g * g)
    grads[prefix + "wh"] += dag.T @ x
    grads[prefix + "uh"] += dag.T @ (r * h)
    grads[prefix + "bh"] += dag.sum(axis=0)
    drh = dag @ u
    dr = drh * h
    dh += drh * r
    dar = dr * r * (1.0 - r)
    grads[prefix + "wr"] += dar.T @ x
    grads[prefix + "ur"] += dar.T @ h
    grads[prefix + "br"] += dar.sum(axis=0)
    dh += dar @ ur
    daz = dz * z * (1.0 - z)
    grads[prefix + "wz"] += daz.T @ x
    grads[prefix + "uz"] += daz.T @ h
    grads[prefix + "bz"] += daz.sum(axis=0)
    dh += daz @ uz
    dx = dag @ w + dar @ wr + daz @ wz
    return dx, dh


def _attend(p: ModelParams, query, m1, m2):
    """Additive attention over the two memory slots; returns context and cache."""
    base = query @ p.att_wq.T + p.att_ba
    t1 = np.tanh(base + m1 @ p.att_wm.T)
    t2 = np.tanh(base + m2 @ p.att_wm.T)
    scores = np.stack([t1 @ p.att_v, t2 @ p.att_v], axis=1)
    scores = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(scores)
    alpha = expd / expd.sum(axis=1, keepdims=True)
    c = alpha[:, 0:1] * m1 + alpha[:, 1:2] * m2
    return c, (query, m1, m2, t1, t2, alpha)


def _attend_backward(p: ModelParams, dc, cache, grads):
    query, m1, m2, t1, t2, alpha = cache
    da1 = (dc * m1).sum(axis=1)
    da2 = (dc * m2).sum(axis=1)
    dot = alpha[:, 0] * da1 + alpha[:, 1] * da2
    de1 = alpha[:, 0] * (da1 - dot)
    de2 = alpha[:, 1] * (da2 - dot)
    dp1 = (de1[:, None] * p.att_v[None, :]) * (1.0 - t1 * t1)
    dp2 = (de2[:, None] * p.att_v[None, :]) * (1.0 - t2 * t2)
    grads["att_v"] += t1.T @ de1 + t2.T @ de2
    grads["att_wq"] += dp1.T @ query + dp2.T @ query
    grads["att_wm"] += dp1.T @ m1 + dp2.T @ m2
    grads["att_ba"] += dp1.sum(axis=0) + dp2.sum(axis=0)
    dq = (dp1 + dp2) @ p.att_wq
    dm1 = alpha[:, 0:1] * dc + dp1 @ p.att_wm
    dm2 = alpha[:, 1:2] * dc + dp2 @ p.att_wm
    return dq, dm1, dm2


def forward_batch(p: ModelParams, batch: Batch):
    """Teacher-forced forward pass; returns per-step logits and the backward cache."""
    B, L = batch.X.shape
    T = batch.targets.shape[1]

    h = np.zeros((B, p.enc_hidden))
    enc_cache = []
    for t in range(L):
        x = p.emb[batch.X[:, t]]
        h, cache = _gru_step(x, h, p.enc_wh, p.enc_uh, p.enc_bh,
                             p.enc_wz, p.enc_uz, p.enc_bz, p.enc_wr, p.enc_ur, p.enc_br)
        enc_cache.append(cache)

    u = np.concatenate([h, batch.N, batch.mask, p.emb[batch.o]], axis=1)
    s0 = u @ p.s0_w.T + p.s0_b

    prev_tokens = np.concatenate(
        [np.full((B, 1), START_ID, dtype=np.int64), batch.targets[:, :-1]], axis=1
    )
    s = s0
    logits = np.empty((B, T, p.vocab_size))
    dec_cache = []
    for i in range(T):
        c, att_cache = _attend(p, s, s0, s)
        x = np.concatenate([p.emb[prev_tokens[:, i]], c], axis=1)
        s, gru_cache = _gru_step(x, s, p.dec_wh, p.dec_uh, p.dec_bh,
                                 p.dec_wz, p.dec_uz, p.dec_bz, p.dec_wr, p.dec_ur, p.dec_br)
        logits[:, i] = s @ p.out_w.T + p.out_b
        dec_cache.append((prev_tokens[:, i], att_cache, gru_cache, s))

    cache = {"enc": enc_cache, "dec": dec_cache, "u": u, "s0": s0, "h_n": h, "batch": batch}
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_batch(logits: np.ndarray, targets: np.ndarray, tmask: np.ndarray) -> float:
    """Token-level negative log-likelihood, averaged over unmasked tokens."""
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * tmask).sum() / tmask.sum())


def backward_batch(p: ModelParams, logits, cache):
    """Gradients of the batch loss with respect to every parameter."""
    batch: Batch = cache["batch"]
    B, T = batch.targets.shape
    total = batch.tmask.sum()

    grads = {name: np.zeros_like(arr) for name, arr in p.arrays().items()}

    probs = softmax(logits)
    dlogits = probs
    rows = np.arange(B)
    for i in range(T):
        dlogits[rows, i, batch.targets[:, i]] -= 1.0
    dlogits *= (batch.tmask / total)[:, :, None]

    ds_next = np.zeros((B, p.dec_hidden))
    ds0 = np.zeros((B, p.dec_hidden))
    demb = grads["emb"]
    for i in reversed(range(T)):
        prev_tok, att_cache, gru_cache, s = cache["dec"][i]
        dl = dlogits[:, i]
        grads["out_w"] += dl.T @ s
        grads["out_b"] += dl.sum(axis=0)
        ds = dl @ p.out_w + ds_next
        dx, ds_prev = _gru_backward(ds, gru_cache, p.dec_wh, p.dec_uh,
                                    p.dec_wz, p.dec_uz, p.dec_wr, p.dec_ur, grads, "dec_")
        np.add.at(demb, prev_tok, dx[:, : p.emb_dim])
        dc = dx[:, p.emb_dim:]
        dq, dm1, dm2 = _attend_backward(p, dc, att_cache, grads)
        ds0 += dm1
        ds_next = ds_prev + dq + dm2
    ds0 += ds_next

    u = cache["u"]
    grads["s0_w"] += ds0.T @ u
    grads["s0_b"] += ds0.sum(axis=0)
    du = ds0 @ p.s0_w
    dh = du[:, : p.enc_hidden]
    np.add.at(demb, cache["batch"].o, du[:, p.enc_hidden + 2 * p.n_features:])

    for t in reversed(range(len(cache["enc"]))):
        dx, dh = _gru_backward(dh, cache["enc"][t], p.enc_wh, p.enc_uh,
                               p.enc_wz, p.enc_uz, p.enc_wr, p.enc_ur, grads, "enc_")
        np.add.at(demb, batch.X[:, t], dx)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    return grads


def loss_and_grads(p: ModelParams, batch: Batch):
    logits, cache = forward_batch(p, batch)
    value = loss_batch(logits, batch.targets, batch.tmask)
    grads = backward_batch(p, logits, cache)
    return value, grads


# --- single-example fronts ---------------------------------------------------

def forward(p: ModelParams, features: FeatureVector, target):
    """Per-step logits (T, vocab) plus the cache for one teacher-forced example."""
    batch = make_batch([TrainingExample(features, tuple(target))])
    logits, cache = forward_batch(p, batch)
    return logits[0], cache


def loss(logits: np.ndarray, target) -> float:
    """Mean token-level negative log-likelihood for one example."""
    if logits.shape[0] != len(target):
        raise ValueError("one logits row per target token required")
    targets = np.asarray(target, dtype=np.int64)[None, :]
    return loss_batch(logits[None, ...], targets, np.ones_like(targets, dtype=np.float64))


def grads(p: ModelParams, example: TrainingExample) -> dict:
    """Analytic gradients of the example loss for every parameter block."""
    _, g = loss_and_grads(p, make_batch([example]))
    return g


def attention_weights(cache) -> np.ndarray:
    """Per-step attention over {s_0, s_prev}: shape (B, T, 2)."""
    return np.stack([att[5] for _, att, _, _ in cache["dec"]], axis=1)


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(p: ModelParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in p.arrays().items()},
        v={name: np.zeros_like(arr) for name, arr in p.arrays().items()},
    )


def adam_step(
    p: ModelParams,
    grads_: dict,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected Adam update; returns the updated params and state."""
    t = state.step + 1
    new_m, new_v, new_arrays = {}, {}, {}
    for name, arr in p.arrays().items():
        g = grads_[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_arrays[name] = arr - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return p.with_arrays(new_arrays), AdamState(m=new_m, v=new_v, step=t)


# --- decoding ----------------------------------------------------------------

def greedy_decode(p: ModelParams, features: FeatureVector, vocab: Vocabulary, max_len: int = 40) -> str:
    """Argmax decoding from START until END or max_len; ties go to the lowest id."""
    x_ids = features.X[None, :]
    h = np.zeros((1, p.enc_hidden))
    for t in range(x_ids.shape[1]):
        h, _ = _gru_step(p.emb[x_ids[:, t]], h, p.enc_wh, p.enc_uh, p.enc_bh,
                         p.enc_wz, p.enc_uz, p.enc_bz, p.enc_wr, p.enc_ur, p.enc_br)
    u = np.concatenate(
        [h, features.N[None, :], features.mask[None, :], p.emb[np.array([features.o])]], axis=1
    )
    s = u @ p.s0_w.T + p.s0_b
    s0 = s
    prev = START_ID
    out = []
    for _ in range(max_len):
        c, _ = _attend(p, s, s0, s)
        x = np.concatenate([p.emb[np.array([prev])], c], axis=1)
        s, _ = _gru_step(x, s, p.dec_wh, p.dec_uh, p.dec_bh,
                         p.dec_wz, p.dec_uz, p.dec_bz, p.dec_wr, p.dec_ur, p.dec_br)
        logits = (s @ p.out_w.T + p.out_b)[0]
        token = int(np.argmax(logits))
        if token == END_ID:
            break
        out.append(token)
        prev = token
    return vocab.decode(out, skip_specials=True)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: "str | Path", p: ModelParams, vocab_hash: str) -> None:
    """Versioned JSON header plus row-major little-endian float64 blocks."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "vocab_sha256": vocab_hash,
        "seed": p.seed,
        "dims": {
            "vocab_size": p.vocab_size,
            "emb_dim": p.emb_dim,
            "enc_hidden": p.enc_hidden,
            "dec_hidden": p.dec_hidden,
            "attn_dim": p.attn_dim,
            "n_features": p.n_features,
        },
        "params": [{"name": n, "shape": list(getattr(p, n).shape)} for n in PARAM_NAMES],
    }
    blob = b"".join(np.ascontiguousarray(getattr(p, n), dtype="<f8").tobytes() for n in PARAM_NAMES)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: "str | Path", expected_vocab_hash: str | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {header.get('format_version')!r}")
    if expected_vocab_hash is not None and header["vocab_sha256"] != expected_vocab_hash:
        raise ValueError("checkpoint was trained against a different vocabulary")
    dims = header["dims"]
    p = ModelParams(seed=header["seed"], **dims)
    arrays = {}
    offset = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        arrays[spec["name"]] = arr
        offset += count * 8
    return p.with_arrays(arrays)


def checkpoint_vocab_hash(path: "str | Path") -> str:
    with open(path, "rb") as fh:
        return json.loads(fh.readline().decode())["vocab_sha256"]
