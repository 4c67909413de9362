"""Encode -> local message passing -> token-attention blocks -> local message
passing -> decode.

Three encoders lift node, mesh-edge and contact-edge features into a shared
latent width.  A pre-processing stack of message-passing iterations absorbs
local structure, two token-attention blocks perform the global update by
slicing nodes onto a small set of learned tokens (softmax weights with
per-node adaptive temperature, optionally sharpened with Gumbel noise during
training), attending over the tokens, and redistributing them with the same
weights, and a refinement stack restores local consistency before the
decoder MLP reads out per-node predictions.

The attention core costs O(N*P + P^2) instead of O(N^2): the token-token
term is independent of the node count, which the op census on the tape can
verify exactly.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .mesh import GraphSample
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class ModelConfig:
    node_feat_dim: int
    mesh_edge_feat_dim: int
    contact_edge_feat_dim: int
    pe_dim: int
    output_dim: int
    latent_dim: int = 112
    mpnn_pre: int = 2
    mpnn_refine: int = 2
    n_transformer_blocks: int = 2
    n_heads: int = 4
    n_tokens: int = 32
    transformer_dims: tuple[int, int, int] = (64, 32, 64)
    tau0: float = 0.5
    tau_min: float = 0.01
    leaky_slope: float = 0.01
    ln_eps: float = 1e-5
    decoder_layer_norm: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.transformer_dims)
        object.__setattr__(self, "transformer_dims", dims)
        positive = (self.node_feat_dim, self.mesh_edge_feat_dim, self.contact_edge_feat_dim,
                    self.output_dim, self.latent_dim, self.n_heads, self.n_tokens) + dims
        if any(v <= 0 for v in positive):
            raise ConfigError("all model dimensions must be positive")
        if dims[1] % self.n_heads != 0:
            raise ConfigError(
                f"attention width {dims[1]} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.transformer_dims[1] // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transformer_dims"] = list(self.transformer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["transformer_dims"] = tuple(d["transformer_dims"])
        return cls(**d)


def table2_config(node_feat_dim: int, mesh_edge_feat_dim: int, contact_edge_feat_dim: int,
                  pe_dim: int, output_dim: int, **overrides) -> ModelConfig:
    """Default architecture: 2+2 message passing, 2 blocks, 4 heads, 32 tokens."""
    return ModelConfig(node_feat_dim, mesh_edge_feat_dim, contact_edge_feat_dim,
                       pe_dim, output_dim, **overrides)


def mgn_baseline_config(node_feat_dim: int, mesh_edge_feat_dim: int,
                        contact_edge_feat_dim: int, pe_dim: int,
                        output_dim: int) -> ModelConfig:
    """Deep-stack ablation: 15 message-passing iterations at width 128, no blocks."""
    return ModelConfig(node_feat_dim, mesh_edge_feat_dim, contact_edge_feat_dim,
                       pe_dim, output_dim, latent_dim=128, mpnn_pre=15, mpnn_refine=0,
                       n_transformer_blocks=0)


@dataclass
class LatentGraph:
    """Latent state threaded through the processor stages."""

    nodes: Tensor
    mesh_edges: Tensor
    contact_edges: Tensor
    slice_weights: list[np.ndarray] = field(default_factory=list)  # [N, P] per block


# ---------------------------------------------------------------------------
# parameters

def _mlp_shapes(shapes: dict, prefix: str, d_in: int, d_hidden: int, d_out: int,
                with_ln: bool) -> None:
    shapes[f"{prefix}.w0"] = (d_in, d_hidden)
    shapes[f"{prefix}.b0"] = (d_hidden,)
    shapes[f"{prefix}.w1"] = (d_hidden, d_out)
    shapes[f"{prefix}.b1"] = (d_out,)
    if with_ln:
        shapes[f"{prefix}.ln_g"] = (d_out,)
        shapes[f"{prefix}.ln_b"] = (d_out,)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable parameter, in construction order."""
    shapes: dict[str, tuple[int, ...]] = {}
    L = cfg.latent_dim
    _mlp_shapes(shapes, "enc_node", cfg.node_feat_dim, L, L, True)
    _mlp_shapes(shapes, "enc_mesh", cfg.mesh_edge_feat_dim, L, L, True)
    _mlp_shapes(shapes, "enc_contact", cfg.contact_edge_feat_dim, L, L, True)
    for i in range(cfg.mpnn_pre + cfg.mpnn_refine):
        _mlp_shapes(shapes, f"mpnn{i}.edge", 3 * L, L, L, True)
        _mlp_shapes(shapes, f"mpnn{i}.node", 3 * L, L, L, True)
    w1, w2, w3 = cfg.transformer_dims
    c = cfg.head_dim
    for b in range(cfg.n_transformer_blocks):
        p = f"block{b}"
        shapes[f"{p}.in_w"] = (L + cfg.pe_dim, w1)
        shapes[f"{p}.in_b"] = (w1,)
        shapes[f"{p}.slice_w"] = (w1, cfg.n_tokens)
        shapes[f"{p}.slice_b"] = (cfg.n_tokens,)
        shapes[f"{p}.temp_w"] = (w1, 1)
        shapes[f"{p}.temp_b"] = (1,)
        for h in range(cfg.n_heads):
            for name in ("q", "k", "v"):
                shapes[f"{p}.h{h}.{name}_w"] = (w1, c)
                shapes[f"{p}.h{h}.{name}_b"] = (c,)
        shapes[f"{p}.attn_out_w"] = (w2, w1)
        shapes[f"{p}.attn_out_b"] = (w1,)
        shapes[f"{p}.ln_g"] = (w1,)
        shapes[f"{p}.ln_b"] = (w1,)
        shapes[f"{p}.ffn_w0"] = (w1, w3)
        shapes[f"{p}.ffn_b0"] = (w3,)
        shapes[f"{p}.ffn_w1"] = (w3, w1)
        shapes[f"{p}.ffn_b1"] = (w1,)
        shapes[f"{p}.out_w"] = (w1, L)
        shapes[f"{p}.out_b"] = (L,)
    _mlp_shapes(shapes, "dec", L, L, cfg.output_dim, cfg.decoder_layer_norm)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Exact number of trainable scalars for a configuration."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform fan-in init; zero biases; temperature projection starts flat;
    the final decoder layer starts at 1/10 scale."""
    rng = np.random.default_rng([int(seed), 0x7EA0])
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln_g"):
            data = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b") or leaf.startswith("ln_b"):
            data = np.zeros(shape)
        elif name.startswith("block") and ("temp_w" in name):
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
            if name == "dec.w1":
                data = data * 0.1
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# network pieces

def _scope(label: str):
    tape = Tape._active
    return tape.scope(label) if tape is not None else contextlib.nullcontext()


def _linear(params, prefix: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}_w"]), params[f"{prefix}_b"])


def _mlp(params, prefix: str, x: Tensor, cfg: ModelConfig, with_ln: bool = True) -> Tensor:
    h = T.add(T.matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"])
    h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.add(T.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    if with_ln:
        h = T.layer_norm(h, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"], cfg.ln_eps)
    return h


def encode(sample: GraphSample, params: dict[str, Tensor], cfg: ModelConfig) -> LatentGraph:
    """Lift node and edge features into the latent width."""
    if sample.node_features.shape[1] != cfg.node_feat_dim:
        raise ConfigError(
            f"node feature dim {sample.node_features.shape[1]} != config {cfg.node_feat_dim}")
    if sample.mesh_edge_features.shape[1] != cfg.mesh_edge_feat_dim:
        raise ConfigError(
            f"mesh edge feature dim {sample.mesh_edge_features.shape[1]} "
            f"!= config {cfg.mesh_edge_feat_dim}")
    if (sample.contact_edge_features.shape[0]
            and sample.contact_edge_features.shape[1] != cfg.contact_edge_feat_dim):
        raise ConfigError(
            f"contact edge feature dim {sample.contact_edge_features.shape[1]} "
            f"!= config {cfg.contact_edge_feat_dim}")
    nodes = _mlp(params, "enc_node", Tensor(sample.node_features), cfg)
    mesh = _mlp(params, "enc_mesh", Tensor(sample.mesh_edge_features), cfg)
    contact_feats = sample.contact_edge_features
    if contact_feats.shape[0] == 0:
        contact_feats = np.zeros((0, cfg.contact_edge_feat_dim))
    contact = _mlp(params, "enc_contact", Tensor(contact_feats), cfg)
    return LatentGraph(nodes=nodes, mesh_edges=mesh, contact_edges=contact)


def mpnn_iteration(lat: LatentGraph, sample: GraphSample, params: dict[str, Tensor],
                   index: int, cfg: ModelConfig) -> LatentGraph:
    """One local update: residual edge MLP (shared weights over both edge
    sets), then residual node MLP over the separately aggregated messages."""
    n = sample.n_nodes
    prefix = f"mpnn{index}"

    def update_edges(edge_lat: Tensor, edges: np.ndarray) -> Tensor:
        gathered_src = T.gather_rows(lat.nodes, edges[:, 0])
        gathered_dst = T.gather_rows(lat.nodes, edges[:, 1])
        e_in = T.concat([edge_lat, gathered_src, gathered_dst], axis=1)
        return T.add(edge_lat, _mlp(params, f"{prefix}.edge", e_in, cfg))

    mesh_new = update_edges(lat.mesh_edges, sample.mesh_edges)
    contact_new = update_edges(lat.contact_edges, sample.contact_edges)
    agg_mesh = T.segment_sum(mesh_new, sample.mesh_edges[:, 1], n)
    agg_contact = T.segment_sum(contact_new, sample.contact_edges[:, 1], n)
    n_in = T.concat([lat.nodes, agg_mesh, agg_contact], axis=1)
    nodes_new = T.add(lat.nodes, _mlp(params, f"{prefix}.node", n_in, cfg))
    return LatentGraph(nodes=nodes_new, mesh_edges=mesh_new, contact_edges=contact_new,
                       slice_weights=lat.slice_weights)


def slice_tokens(h: Tensor, params: dict[str, Tensor], block: int, cfg: ModelConfig,
                 gumbel: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Project nodes onto tokens: softmax slice weights with per-node adaptive
    temperature, tokens as the weights' normalized convex combinations."""
    p = f"block{block}"
    logits = _linear(params, f"{p}.slice", h)
    tau = T.add(_linear(params, f"{p}.temp", h), cfg.tau0)
    tau = T.maximum_scalar(tau, cfg.tau_min)
    if gumbel is not None:
        logits = T.add(logits, Tensor(gumbel))
    w = T.softmax(T.div(logits, tau), axis=1)
    colsum = T.reshape(T.sum_axis(w, axis=0), (cfg.n_tokens, 1))
    # softmax weights are strictly positive; the tiny floor only guards
    # float underflow when a token attracts no node at all
    z = T.div(T.matmul(T.transpose(w), h), T.add(colsum, 1e-30))
    return z, w


def token_attention(z: Tensor, params: dict[str, Tensor], block: int,
                    cfg: ModelConfig) -> Tensor:
    """Multi-head scaled dot-product attention over the P tokens."""
    p = f"block{block}"
    inv_sqrt_c = 1.0 / np.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.n_heads):
        q = _linear(params, f"{p}.h{h}.q", z)
        k = _linear(params, f"{p}.h{h}.k", z)
        v = _linear(params, f"{p}.h{h}.v", z)
        attn = T.softmax(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_c), axis=1)
        heads.append(T.matmul(attn, v))
    merged = T.concat(heads, axis=1)
    return _linear(params, f"{p}.attn_out", merged)


def deslice(z_updated: Tensor, w: Tensor) -> Tensor:
    """Redistribute updated tokens to nodes with the same slice weights."""
    return T.matmul(w, z_updated)


def transformer_block(lat_nodes: Tensor, pe: np.ndarray, params: dict[str, Tensor],
                      block: int, cfg: ModelConfig,
                      sample_ranges: tuple[tuple[int, int], ...],
                      gumbel: np.ndarray | None,
                      collect: list[np.ndarray] | None) -> Tensor:
    """One global update: project latents + positional encodings into the
    block width, apply slice/attend/deslice per constituent sample with a
    residual, a pre-norm feed-forward residual, and project back."""
    p = f"block{block}"
    h_all = _linear(params, f"{p}.in", T.concat([lat_nodes, Tensor(pe)], axis=1))
    parts = []
    weights = []
    for (start, stop) in sample_ranges:
        h = T.slice_rows(h_all, start, stop) if len(sample_ranges) > 1 else h_all
        g = gumbel[start:stop] if gumbel is not None else None
        with _scope("slice"):
            z, w = slice_tokens(h, params, block, cfg, g)
        with _scope("token_attention"):
            z_updated = token_attention(z, params, block, cfg)
        with _scope("deslice"):
            update = deslice(z_updated, w)
        parts.append(T.add(h, update))
        weights.append(w.data)
    h1 = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    normed = T.layer_norm(h1, params[f"{p}.ln_g"], params[f"{p}.ln_b"], cfg.ln_eps)
    hidden = T.leaky_relu(T.add(T.matmul(normed, params[f"{p}.ffn_w0"]),
                                params[f"{p}.ffn_b0"]), cfg.leaky_slope)
    ffn_out = T.add(T.matmul(hidden, params[f"{p}.ffn_w1"]), params[f"{p}.ffn_b1"])
    h2 = T.add(h1, ffn_out)
    if collect is not None:
        collect.append(np.concatenate(weights, axis=0))
    # residual update keeps the latent stream intact through the narrow block
    return T.add(lat_nodes, _linear(params, f"{p}.out", h2))


def sample_gumbel(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Gumbel noise -log(-log(eps)) with eps drawn from the open unit interval."""
    eps = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(eps))


def forward(sample: GraphSample, params: dict[str, Tensor], cfg: ModelConfig,
            train_mode: bool = False, rng: np.random.Generator | None = None,
            gumbel: list[np.ndarray] | None = None,
            collect_weights: bool = False) -> tuple[Tensor, dict]:
    """Full pass; returns per-node predictions and an aux dict.

    In train mode the slice logits receive Gumbel noise, drawn from ``rng``
    unless explicit per-block arrays are supplied (as grad checks need a
    frozen draw).  Eval mode is deterministic.
    """
    if train_mode and gumbel is None:
        if rng is None:
            raise ValidationError("train mode needs an rng or explicit gumbel noise")
        gumbel = [sample_gumbel(rng, (sample.n_nodes, cfg.n_tokens))
                  for _ in range(cfg.n_transformer_blocks)]
    with _scope("encode"):
        lat = encode(sample, params, cfg)
    with _scope("mpnn_pre"):
        for i in range(cfg.mpnn_pre):
            lat = mpnn_iteration(lat, sample, params, i, cfg)
    collect: list[np.ndarray] | None = [] if collect_weights else None
    nodes = lat.nodes
    for b in range(cfg.n_transformer_blocks):
        g = gumbel[b] if (train_mode and gumbel is not None) else None
        nodes = transformer_block(nodes, sample.positional_encoding, params, b, cfg,
                                  sample.sample_ranges, g, collect)
    lat = LatentGraph(nodes=nodes, mesh_edges=lat.mesh_edges,
                      contact_edges=lat.contact_edges,
                      slice_weights=collect if collect is not None else [])
    with _scope("mpnn_refine"):
        for i in range(cfg.mpnn_refine):
            lat = mpnn_iteration(lat, sample, params, cfg.mpnn_pre + i, cfg)
    with _scope("decode"):
        y = _mlp(params, "dec", lat.nodes, cfg, with_ln=cfg.decoder_layer_norm)
    aux = {"slice_weights": lat.slice_weights}
    return y, aux


def attention_core_census(n_nodes: int, cfg: ModelConfig, seed: int = 0
                          ) -> dict[str, dict[str, tuple[int, int]]]:
    """Op census of slice -> token attention -> deslice on random latents."""
    rng = np.random.default_rng([seed, n_nodes])
    params = init_params(cfg, seed)
    h = Tensor(rng.standard_normal((n_nodes, cfg.transformer_dims[0])))
    with Tape() as tape:
        with tape.scope("slice"):
            z, w = slice_tokens(h, params, 0, cfg, None)
        with tape.scope("token_attention"):
            z_updated = token_attention(z, params, 0, cfg)
        with tape.scope("deslice"):
            deslice(z_updated, w)
        census = tape.census()
    return {k: v for k, v in census.items() if k != "main"}
