"""Initial embeddings, positional encodings, and the layered
partition-and-navigation encoder for single-depot and multi-depot
min-max routing problems.

All trainable parameters of the model (encoder and decoder) are built
here by init_params and live in one flat name -> Tensor dict.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .problems import KINDS, MULTI_DEPOT_KINDS, Instance

PE_KINDS = ("rotation", "sinusoidal")


@dataclass
class ModelConfig:
    """Model hyperparameters shared by encoder, decoder and rollout."""

    kind: str
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    pe: str = "rotation"
    use_nav: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.pe not in PE_KINDS:
            raise ValueError(f"unknown pe kind {self.pe!r}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ValueError("d_model must be even and >= 2")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError("n_heads must divide d_model")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_ff < 1:
            raise ValueError("d_ff must be >= 1")

    @property
    def multi_depot(self):
        return self.kind in MULTI_DEPOT_KINDS

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {"kind": self.kind, "n_layers": self.n_layers,
                "d_model": self.d_model, "n_heads": self.n_heads,
                "d_ff": self.d_ff, "pe": self.pe, "use_nav": self.use_nav}

    @classmethod
    def from_dict(cls, rec):
        known = {"kind", "n_layers", "d_model", "n_heads", "d_ff", "pe", "use_nav"}
        extra = set(rec) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**rec)


@dataclass
class Embeddings:
    """Encoder output streams: agents M x d, customers N x d, depots D x d."""

    H_a: dc.Tensor
    H_c: dc.Tensor
    H_d: dc.Tensor = None


class ProbeStore:
    """Collects raw and softmaxed attention scores during a forward pass."""

    def __init__(self):
        self._scores = {}

    def record(self, layer, relation, head, raw, soft):
        self._scores[(layer, relation, head)] = (raw.copy(), soft.copy())

    def relations(self, layer):
        return sorted({r for (l, r, _h) in self._scores if l == layer})

    def blocks(self, layer, head):
        out = {}
        for (l, r, h), mats in self._scores.items():
            if l == layer and h == head:
                out[r] = mats
        if not out:
            raise RuntimeError(f"no probe data for layer {layer}, head {head}")
        return out


def attention_probe(probe, layer, head):
    """Score blocks recorded at (layer, head): relation -> (raw, softmaxed).

    Relations are named source_context, e.g. "agent_customer" holds the
    scores of agents attending over customers. Raises if the forward pass
    ran without a ProbeStore.
    """
    if probe is None:
        raise RuntimeError("probe not enabled: pass a ProbeStore to encode")
    return probe.blocks(layer, head)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def sinusoidal_pe(n_pos, d):
    """Classic sinusoidal table, n_pos x d: sin on even columns, cos on odd."""
    if d % 2 != 0:
        raise ValueError("sinusoidal_pe needs an even dimension")
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    denom = 10000.0 ** ((np.arange(d) // 2) / d)
    angles = pos / denom[None, :]
    table = np.empty((n_pos, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


@lru_cache(maxsize=64)
def _rotation_tables(n_pos, d):
    # theta_i = (1/1000)^((i-1)/d) for i in 1..d/2; pair p uses theta_{p+1}
    theta = 1000.0 ** (-np.arange(d // 2, dtype=np.float64) / d)
    angles = np.arange(n_pos, dtype=np.float64)[:, None] * theta[None, :]
    cos_t = np.repeat(np.cos(angles), 2, axis=1).astype(dc.DEFAULT_DTYPE)
    sin_t = np.repeat(np.sin(angles), 2, axis=1).astype(dc.DEFAULT_DTYPE)
    swap = np.zeros((d, d), dtype=dc.DEFAULT_DTYPE)
    for p in range(d // 2):
        swap[2 * p + 1, 2 * p] = -1.0  # even slot receives -base[odd]
        swap[2 * p, 2 * p + 1] = 1.0   # odd slot receives +base[even]
    return cos_t, sin_t, swap


def rotation_pe(base, n_pos, w_pe):
    """Rotate the 1 x d base by position-dependent pair angles, project by w_pe.

    Row m rotates each (2p, 2p+1) pair of base by m * theta_{p+1}; row 0 is
    therefore exactly base @ w_pe. Differentiable in base and w_pe.
    """
    d = base.shape[1]
    if d % 2 != 0:
        raise ValueError("rotation_pe needs an even dimension")
    cos_t, sin_t, swap = _rotation_tables(n_pos, d)
    ones = dc.constant(np.ones((n_pos, 1)))
    tiled = dc.matmul(ones, base)                       # n_pos x d
    swapped = dc.matmul(tiled, dc.constant(swap))
    rotated = dc.add(dc.mul(tiled, dc.constant(cos_t)),
                     dc.mul(swapped, dc.constant(sin_t)))
    return dc.matmul(rotated, w_pe)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attn_params(params, prefix, d, n_heads, rng, split_query=False):
    d_k = d // n_heads
    for i in range(n_heads):
        if split_query:
            params[f"{prefix}.qp{i}"] = dc.init_matrix(d, d_k, rng)
            params[f"{prefix}.qd{i}"] = dc.init_matrix(d, d_k, rng)
        else:
            params[f"{prefix}.q{i}"] = dc.init_matrix(d, d_k, rng)
        params[f"{prefix}.k{i}"] = dc.init_matrix(d, d_k, rng)
        params[f"{prefix}.v{i}"] = dc.init_matrix(d, d_k, rng)
    params[f"{prefix}.proj"] = dc.init_matrix(d, d, rng)


def _ff_params(params, prefix, d, d_ff, rng):
    params[f"{prefix}.w1"] = dc.init_matrix(d, d_ff, rng)
    params[f"{prefix}.w2"] = dc.init_matrix(d_ff, d, rng)


_SINGLE_BLOCKS = ("nav", "agent", "cust")
_MULTI_BLOCKS = ("nav", "dc", "cd", "ad", "da", "ac", "ca")


def init_params(cfg, rng):
    """Build every trainable tensor of the model, freshly initialized.

    Weights are uniform +-1/sqrt(fan_in), biases and ReZero scalars zero,
    the distance-bias scale starts at -1.
    """
    d, d_ff, H = cfg.d_model, cfg.d_ff, cfg.n_heads
    params = {}

    params["embed.customer.W"] = dc.init_matrix(2, d, rng)
    params["embed.customer.b"] = dc.zeros(1, d)
    params["embed.depot.W"] = dc.init_matrix(2, d, rng)
    params["embed.depot.b"] = dc.zeros(1, d)
    if cfg.kind == "MPDP":
        params["embed.pickup.b"] = dc.zeros(1, d)
        params["embed.delivery.b"] = dc.zeros(1, d)
    if cfg.multi_depot:
        bound = 1.0 / math.sqrt(d)
        seed = rng.uniform(-bound, bound, size=(1, d)).astype(dc.DEFAULT_DTYPE)
        params["embed.agent_seed"] = dc.Tensor(seed, requires_grad=True)
    if cfg.pe == "rotation":
        params["pe.proj"] = dc.init_matrix(d, d, rng)

    blocks = _MULTI_BLOCKS if cfg.multi_depot else _SINGLE_BLOCKS
    for l in range(cfg.n_layers):
        for b in blocks:
            if b == "nav" and not cfg.use_nav:
                continue
            split = b == "cust" and cfg.kind == "MPDP"
            _attn_params(params, f"layer{l}.{b}_attn", d, H, rng, split_query=split)
            _ff_params(params, f"layer{l}.{b}_ff", d, d_ff, rng)
        n_alpha = 14 if cfg.multi_depot else 6
        first = 3 if (not cfg.use_nav) else 1
        for j in range(first, n_alpha + 1):
            params[f"layer{l}.a{j}"] = dc.zeros(1, 1)

    params["dec.emb"] = dc.init_matrix(d, d, rng)
    params["dec.step"] = dc.init_matrix(2 * d + 2, d, rng)
    n_len = 5 if cfg.kind == "MPDP" else 3
    params["dec.length"] = dc.init_matrix(n_len, d, rng)
    _attn_params(params, "dec.glimpse", d, H, rng)
    params["dec.logit"] = dc.init_matrix(d, d, rng)
    alpha_d = dc.Tensor(np.full((1, 1), -1.0), requires_grad=True)
    params["dec.alpha_dist"] = alpha_d
    return params


def check_params(cfg, params):
    """Raise if the parameter dict does not match the config's shapes."""
    w = params.get("embed.customer.W")
    if w is None:
        raise ValueError("params missing embed.customer.W")
    if w.shape[1] != cfg.d_model:
        raise ValueError(f"config d_model={cfg.d_model} but params have "
                         f"d_model={w.shape[1]}")
    last = f"layer{cfg.n_layers - 1}.ca_ff.w1" if cfg.multi_depot \
        else f"layer{cfg.n_layers - 1}.cust_ff.w1"
    if cfg.n_layers > 0 and last not in params:
        raise ValueError(f"params missing {last}: config expects "
                         f"{cfg.n_layers} {cfg.kind} layers")


# ---------------------------------------------------------------------------
# attention and feed-forward blocks
# ---------------------------------------------------------------------------

def _mh_attention(X, C, params, prefix, n_heads, scaled,
                  pickup_rows=None, probe=None, probe_at=None):
    """Multi-head attention of X over context C.

    scaled=True divides logits by sqrt(d_k); scaled=False is the sharp
    variant. pickup_rows (bool per X row) switches per-row query weights
    between the qp/qd projections.
    """
    d_k = params[f"{prefix}.k0"].shape[1]
    if pickup_rows is not None:
        pick = dc.constant(np.repeat(pickup_rows.astype(np.float64)[:, None],
                                     d_k, axis=1))
        notpick = dc.constant(1.0 - pick.data)
    heads = []
    for i in range(n_heads):
        if pickup_rows is None:
            q = dc.matmul(X, params[f"{prefix}.q{i}"])
        else:
            q = dc.add(dc.mul(dc.matmul(X, params[f"{prefix}.qp{i}"]), pick),
                       dc.mul(dc.matmul(X, params[f"{prefix}.qd{i}"]), notpick))
        k = dc.matmul(C, params[f"{prefix}.k{i}"])
        v = dc.matmul(C, params[f"{prefix}.v{i}"])
        raw = dc.matmul(q, dc.transpose(k))
        logits = dc.scale(raw, 1.0 / math.sqrt(d_k)) if scaled else raw
        soft = dc.softmax_rows(logits)
        if probe is not None:
            layer, relation = probe_at
            probe.record(layer, relation, i, logits.data, soft.data)
        heads.append(dc.matmul(soft, v))
    merged = heads[0] if n_heads == 1 else dc.concat_cols(heads)
    return dc.matmul(merged, params[f"{prefix}.proj"])


def mha(X, C, params, prefix, n_heads):
    """Softmax attention with the 1/sqrt(d_k) temperature."""
    return _mh_attention(X, C, params, prefix, n_heads, scaled=True)


def mhsa(X, C, params, prefix, n_heads, pickup_rows=None):
    """Sharp attention: identical to mha but without the temperature."""
    return _mh_attention(X, C, params, prefix, n_heads, scaled=False,
                         pickup_rows=pickup_rows)


def ff(X, params, prefix):
    return dc.matmul(dc.relu(dc.matmul(X, params[f"{prefix}.w1"])),
                     params[f"{prefix}.w2"])


def _rezero(stream, delta, alpha):
    return dc.add(stream, dc.scale(delta, alpha))


def _attn_block(stream, context, params, layer, block, alpha_i, scaled, cfg,
                relation, pickup_rows=None, probe=None):
    prefix = f"layer{layer}.{block}_attn"
    out = _mh_attention(stream, context, params, prefix, cfg.n_heads, scaled,
                        pickup_rows=pickup_rows, probe=probe,
                        probe_at=(layer, relation))
    hat = _rezero(stream, out, params[f"layer{layer}.a{alpha_i}"])
    delta = ff(hat, params, f"layer{layer}.{block}_ff")
    return _rezero(hat, delta, params[f"layer{layer}.a{alpha_i + 1}"])


def _layer_single(emb, params, layer, cfg, pickup_rows, probe):
    H_a, H_c = emb.H_a, emb.H_c
    if cfg.use_nav:
        X_c = _attn_block(H_c, H_c, params, layer, "nav", 1, True, cfg,
                          "customer_customer", probe=probe)
    else:
        X_c = H_c
    H_a2 = _attn_block(H_a, X_c, params, layer, "agent", 3, True, cfg,
                       "agent_customer", probe=probe)
    H_c2 = _attn_block(X_c, H_a2, params, layer, "cust", 5, False, cfg,
                       "customer_agent", pickup_rows=pickup_rows, probe=probe)
    return Embeddings(H_a=H_a2, H_c=H_c2)


def _layer_multi(emb, params, layer, cfg, probe):
    H_a, H_c, H_d = emb.H_a, emb.H_c, emb.H_d
    if cfg.use_nav:
        X_c = _attn_block(H_c, H_c, params, layer, "nav", 1, True, cfg,
                          "customer_customer", probe=probe)
    else:
        X_c = H_c
    X_d = _attn_block(H_d, X_c, params, layer, "dc", 3, True, cfg,
                      "depot_customer", probe=probe)
    O_c = _attn_block(X_c, X_d, params, layer, "cd", 5, False, cfg,
                      "customer_depot", probe=probe)
    X_a = _attn_block(H_a, X_d, params, layer, "ad", 7, False, cfg,
                      "agent_depot", probe=probe)
    H_d2 = _attn_block(X_d, X_a, params, layer, "da", 9, True, cfg,
                       "depot_agent", probe=probe)
    H_a2 = _attn_block(X_a, O_c, params, layer, "ac", 11, True, cfg,
                       "agent_customer", probe=probe)
    H_c2 = _attn_block(O_c, H_a2, params, layer, "ca", 13, False, cfg,
                       "customer_agent", probe=probe)
    return Embeddings(H_a=H_a2, H_c=H_c2, H_d=H_d2)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def initial_embeddings(instance, cfg, params):
    """Project coordinates and add agent positional encodings."""
    d = cfg.d_model
    M = instance.M
    coords = dc.constant(instance.coords)
    H_c = dc.add(dc.matmul(coords, params["embed.customer.W"]),
                 params["embed.customer.b"])
    if cfg.kind == "MPDP":
        half = np.ones((instance.n_pairs, 1))
        types = dc.concat_rows([
            dc.matmul(dc.constant(half), params["embed.pickup.b"]),
            dc.matmul(dc.constant(half), params["embed.delivery.b"]),
        ])
        H_c = dc.add(H_c, types)

    ones_m = dc.constant(np.ones((M, 1)))
    depot_proj = dc.add(dc.matmul(dc.constant(instance.depot_coords),
                                  params["embed.depot.W"]),
                        params["embed.depot.b"])
    if cfg.multi_depot:
        seed = params["embed.agent_seed"]
        if cfg.pe == "rotation":
            H_a = rotation_pe(seed, M, params["pe.proj"])
        else:
            H_a = dc.add(dc.matmul(ones_m, seed),
                         dc.constant(sinusoidal_pe(M, d)))
        return Embeddings(H_a=H_a, H_c=H_c, H_d=depot_proj)

    # single depot: the agent base is the projected depot coordinate
    if cfg.pe == "rotation":
        pe_rows = rotation_pe(depot_proj, M, params["pe.proj"])
    else:
        pe_rows = dc.constant(sinusoidal_pe(M, d))
    H_a = dc.add(dc.matmul(ones_m, depot_proj), pe_rows)
    return Embeddings(H_a=H_a, H_c=H_c)


def encode(instance, cfg, params, probe=None):
    """Run the full encoder: initial embeddings plus n_layers layers."""
    if instance.kind != cfg.kind:
        raise ValueError(f"instance kind {instance.kind} != config {cfg.kind}")
    check_params(cfg, params)
    emb = initial_embeddings(instance, cfg, params)
    pickup_rows = None
    if cfg.kind == "MPDP":
        pickup_rows = np.arange(instance.N) < instance.n_pairs
    for l in range(cfg.n_layers):
        if cfg.multi_depot:
            emb = _layer_multi(emb, params, l, cfg, probe)
        else:
            emb = _layer_single(emb, params, l, cfg, pickup_rows, probe)
    return emb
