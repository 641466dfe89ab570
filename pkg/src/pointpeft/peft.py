"""Point-prior prompts, the geometry-aware adapter and baseline PEFT methods.

``PeftModel`` wraps a pre-trained ``PointTransformer`` and owns whatever a
method attaches. Backbone parameters keep their pre-training names
(``encoder.*``, ``head.*``); attached modules live under ``prompt.*``,
``adapter.*``, ``vpt.*``, ``vadapter.*`` and ``lora.*``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from . import geometry as G
from . import tensor as T
from .backbone import Encoder, EncoderConfig, PointTransformer, TokenSet, global_feature
from .nn import Bottleneck, Linear, Module, Parameter, count
from .tensor import Tensor

METHODS = ("point-peft", "full", "linear", "prompt", "adapter", "lora", "bias")
POSITIONS = ("after", "before", "both", "parallel")


@dataclass
class PeftConfig:
    prompt_depth: int = 2
    prompt_len: int = 5
    adapter_centers: int = 16
    adapter_k: int = 8
    prompt_mlp_dim: int = 8
    adapter_mlp_in_dim: int = 16
    adapter_mlp_out_dim: int = 16
    alpha: float = 1.0
    beta: float = 1.0
    pooling: str = "max"
    adapter_position: str = "after"
    softmax_scale: float = 1.0
    adapter_depth: int = 0  # 0 means every block
    propagate_neighbors: int = 3
    # component switches (ablations)
    use_prompt: bool = True
    use_adapter: bool = True
    tune_bias: bool = True
    use_bank: bool = True
    learnable_coords: bool = True
    per_block_coords: bool = False
    local_aggregation: bool = True
    attention: bool = True
    shared_attention: bool = True
    final_mlp: bool = True
    learnable_balance: bool = False
    # baselines
    lora_rank: int = 4
    baseline_adapter_dim: int = 16

    def resolved_adapter_depth(self, depth: int) -> int:
        return depth if self.adapter_depth == 0 else self.adapter_depth

    def validate(self, enc: EncoderConfig, method: str = "point-peft") -> None:
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be max or mean, got {self.pooling!r}")
        if self.adapter_position not in POSITIONS:
            raise ValueError(f"adapter_position must be one of {POSITIONS}")
        if method == "prompt" and self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if method != "point-peft":
            return
        if self.use_prompt:
            if self.prompt_len < 3:
                raise ValueError(f"prompt_len K must be >= 3, got {self.prompt_len}")
            if not 1 <= self.prompt_depth <= enc.depth:
                raise ValueError(f"prompt_depth L must lie in 1..{enc.depth}")
        if self.use_adapter:
            if not 0 <= self.adapter_depth <= enc.depth:
                raise ValueError(f"adapter_depth must lie in 0..{enc.depth}")
            if self.local_aggregation:
                if not 1 <= self.adapter_centers <= enc.tokens:
                    raise ValueError(f"adapter_centers N={self.adapter_centers} exceeds token count M={enc.tokens}")
                if not 1 <= self.adapter_k <= enc.tokens:
                    raise ValueError(f"adapter_k={self.adapter_k} exceeds token count M={enc.tokens}")


# ---------------------------------------------------------------------------
# point-prior bank


@dataclass
class PriorBank:
    features: np.ndarray  # (|T|, D)
    sample_ids: list
    fingerprint: str

    def save(self, path):
        c = ckpt.Container()
        c.add_tensor("bank.features", self.features)
        c.strings["bank.ids"] = list(self.sample_ids)
        c.fields["bank.fingerprint"] = self.fingerprint
        return ckpt.save(path, c)

    @classmethod
    def from_container(cls, c: ckpt.Container) -> "PriorBank":
        return cls(c.array("bank.features").copy(), list(c.strings["bank.ids"]), c.fields["bank.fingerprint"])

    @classmethod
    def load(cls, path) -> "PriorBank":
        return cls.from_container(ckpt.load(path))


def encoder_fingerprint(encoder: Encoder) -> str:
    h = hashlib.sha256()
    for name, p in encoder.named_parameters("encoder."):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


def encoder_feature(encoder: Encoder, points: np.ndarray, tokens: TokenSet | None = None) -> np.ndarray:
    """Frozen D-dim descriptor: average of the mean-pool and max-pool halves.

    ``tokens`` may carry a tokenization made by an identical tokenizer,
    which skips the patch search.
    """
    with T.no_grad():
        if tokens is None:
            tokens = encoder.tokenize(points, 0)
        gf = global_feature(encoder.encode(tokens)).data
    D = gf.shape[-1] // 2
    return 0.5 * (gf[:, :D] + gf[:, D:])


def build_prior_bank(encoder: Encoder, clouds, batch_size: int = 32) -> PriorBank:
    """One frozen-encoder feature row per training sample, in input order."""
    if len(clouds) == 0:
        raise ValueError("build_prior_bank: empty training set")
    dtype = encoder._dtype
    rows = []
    for lo in range(0, len(clouds), batch_size):
        batch = np.stack([pc.coords for pc in clouds[lo : lo + batch_size]]).astype(dtype)
        rows.append(encoder_feature(encoder, batch))
    feats = np.concatenate(rows).astype(dtype)
    return PriorBank(feats, [pc.id for pc in clouds], encoder_fingerprint(encoder))


def cosine_scores(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(B, D) x (|T|, D) cosine similarities; zero-norm rows score -1."""
    qn = np.linalg.norm(query, axis=-1, keepdims=True)
    kn = np.linalg.norm(keys, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (query @ keys.T) / (qn * kn[None, :])
    bad = (qn == 0) | (kn[None, :] == 0)
    return np.where(bad, -1.0, s)


def prior_attention(f_t: np.ndarray, bank_features: np.ndarray, K: int, gamma: float = 1.0):
    """Parameter-free retrieval over the bank.

    Returns ``(F_A, X_sel, S_sel, idx)`` for a (B, D) or (D,) query: the
    top-(K-2) rows by cosine similarity (descending, ties to the smaller row),
    their scores, and their softmax(gamma * scores)-weighted average.
    """
    single = f_t.ndim == 1
    q = np.atleast_2d(f_t).astype(np.float64)
    X = bank_features.astype(np.float64)
    n = K - 2
    if n < 1:
        raise ValueError("prior_attention: K must be >= 3")
    if X.shape[0] < n:
        raise ValueError(f"prior_attention: bank has {X.shape[0]} rows, needs >= K-2 = {n}")
    S = cosine_scores(q, X)
    idx = np.argsort(-S, axis=1, kind="stable")[:, :n]
    s_sel = np.take_along_axis(S, idx, axis=1)
    z = gamma * s_sel
    w = np.exp(z - z.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    x_sel = X[idx]  # B, n, D
    f_a = np.einsum("bn,bnd->bd", w, x_sel)
    if single:
        return f_a[0], x_sel[0], s_sel[0], idx[0]
    return f_a, x_sel, s_sel, idx


# ---------------------------------------------------------------------------
# attached modules


class PromptParams(Module):
    def __init__(self, dim: int, cfg: PeftConfig, rng, dtype):
        K, L = cfg.prompt_len, cfg.prompt_depth
        self.R = [Parameter(rng.normal(0, 0.02, (K, dim)).astype(dtype)) for _ in range(L)]
        n_coords = L if cfg.per_block_coords else 1
        self.coords = [
            Parameter(rng.uniform(-0.5, 0.5, (K, 3)).astype(dtype), trainable=cfg.learnable_coords)
            for _ in range(n_coords)
        ]
        self.prior_mlp = Bottleneck(dim, cfg.prompt_mlp_dim, rng, dtype, residual=False) if cfg.use_bank else None

    def coords_for(self, i: int) -> Parameter:
        return self.coords[i if len(self.coords) > 1 else 0]


class SingleHeadAttention(Module):
    def __init__(self, dim, rng, dtype):
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        """Self-attention within each group: x is (..., k, D)."""
        D = x.shape[-1]
        att = T.softmax(T.scale(T.matmul(self.q(x), T.transpose(self.k(x))), 1.0 / math.sqrt(D)))
        return self.o(T.matmul(att, self.v(x)))

    def grouped(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """Same as ``self(gather(x, idx))`` with the projections applied before the gather.

        Projection is row-wise, so projecting the (B, L, D) tokens once is
        cheaper than projecting every (B, N, k, D) group member.
        """
        D = x.shape[-1]
        q = T.gather(self.q(x), idx, batched=True)
        k = T.gather(self.k(x), idx, batched=True)
        v = T.gather(self.v(x), idx, batched=True)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(D)))
        return self.o(T.matmul(att, v))


class AdapterBlock(Module):
    """Per-insertion-point pieces of the geometry-aware adapter."""

    def __init__(self, dim, cfg: PeftConfig, rng, dtype):
        self.mlp_in = Bottleneck(dim, cfg.adapter_mlp_in_dim, rng, dtype)
        self.attn = (
            SingleHeadAttention(dim, rng, dtype)
            if cfg.local_aggregation and cfg.attention and not cfg.shared_attention
            else None
        )
        self.mlp_out = Bottleneck(dim, cfg.adapter_mlp_out_dim, rng, dtype) if cfg.final_mlp else None


class AdapterParams(Module):
    def __init__(self, dim, n_blocks, cfg: PeftConfig, rng, dtype):
        self.shared_attn = (
            SingleHeadAttention(dim, rng, dtype)
            if cfg.local_aggregation and cfg.attention and cfg.shared_attention
            else None
        )
        self.blocks = [AdapterBlock(dim, cfg, rng, dtype) for _ in range(n_blocks)]
        if cfg.learnable_balance:
            self.alpha = Parameter(np.full(1, cfg.alpha, dtype))
            self.beta = Parameter(np.full(1, cfg.beta, dtype))


def geometry_adapter(tokens: TokenSet, block: AdapterBlock, shared_attn, cfg: PeftConfig,
                     alpha=None, beta=None) -> TokenSet:
    """Local FPS/kNN aggregation with shared intra-group attention.

    feats -> mlp_in -> (FPS centers, kNN groups, attention, pool + alpha*center,
    inverse-distance propagation + beta*input) -> mlp_out. Coordinates pass
    through unchanged.
    """
    x, coords = tokens.feats, tokens.coords
    B, L, D = x.shape
    t = block.mlp_in(x)
    out = t
    if cfg.local_aggregation:
        N, k = cfg.adapter_centers, cfg.adapter_k
        if N > L or k > L:
            raise ValueError(f"geometry_adapter: N={N}, k={k} exceed token count {L}")
        c = coords.data
        rows = np.arange(B)[:, None]
        cidx = G.batch_fps(c, N, 0)
        nidx = G.batch_knn(c[rows, cidx], c, k)
        tc = T.gather(t, cidx, batched=True)
        attn = shared_attn if shared_attn is not None else block.attn
        tn = attn.grouped(t, nidx) if attn is not None else T.gather(t, nidx, batched=True)
        a = alpha if alpha is not None else cfg.alpha
        b = beta if beta is not None else cfg.beta
        pooled = T.add(G.group_pool(tn, cfg.pooling), _weigh(tc, a))
        center_coords = T.gather(coords, cidx, batched=True)
        prop = G.batch_propagate(center_coords, pooled, coords, cfg.propagate_neighbors)
        out = T.add(prop, _weigh(t, b))
    if block.mlp_out is not None:
        out = block.mlp_out(out)
    return TokenSet(out, coords, tokens.prompt_len)


def _weigh(x: Tensor, w) -> Tensor:
    return T.mul(x, w) if isinstance(w, Tensor) else T.scale(x, w)


class LoRA(Module):
    def __init__(self, dim, rank, rng, dtype):
        self.a = Parameter(rng.normal(0, 1.0 / math.sqrt(dim), (dim, rank)).astype(dtype))
        self.b = Parameter(np.zeros((rank, dim), dtype))

    def __call__(self, x):
        return T.matmul(T.matmul(x, self.a), self.b)


class LoRAPair(Module):
    def __init__(self, dim, rank, rng, dtype):
        self.q = LoRA(dim, rank, rng, dtype)
        self.v = LoRA(dim, rank, rng, dtype)


# ---------------------------------------------------------------------------
# instrumented model


class PeftModel(Module):
    """A pre-trained transformer with one PEFT method attached."""

    def __init__(self, base: PointTransformer, method: str, cfg: PeftConfig,
                 bank: PriorBank | None = None, seed: int = 0, require_bank: bool = True):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        enc_cfg = base.cfg
        cfg.validate(enc_cfg, method)
        self.encoder = base.encoder
        self.head = base.head
        self.method = method
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        self.dtype = base.dtype
        rng = np.random.default_rng([seed, 7])
        D, depth = enc_cfg.dim, enc_cfg.depth
        dtype = base.dtype

        # frozen snapshot of the pre-trained encoder, used for retrieval queries
        self._frozen = Encoder(enc_cfg, np.random.default_rng(0), dtype)
        self._frozen.load_state_dict(self.encoder.state_dict())
        self._frozen.freeze()
        self._bank = None

        pp = method == "point-peft"
        self._prompts_on = pp and cfg.use_prompt
        self._adapter_on = pp and cfg.use_adapter
        if self._prompts_on:
            self.prompt = PromptParams(D, cfg, rng, dtype)
            if cfg.use_bank and (bank is not None or require_bank):
                self._attach_bank(bank)
        if self._adapter_on:
            n_ad = cfg.resolved_adapter_depth(depth) * (2 if cfg.adapter_position == "both" else 1)
            self.adapter = AdapterParams(D, n_ad, cfg, rng, dtype)
        if method == "prompt":
            self.vpt = [Parameter(rng.normal(0, 0.02, (cfg.prompt_len, D)).astype(dtype)) for _ in range(depth)]
        if method == "adapter":
            self.vadapter = [
                Bottleneck(D, cfg.baseline_adapter_dim, rng, dtype, residual=True, zero_up=True) for _ in range(depth)
            ]
        if method == "lora":
            self.lora = [LoRAPair(D, cfg.lora_rank, rng, dtype) for _ in range(depth)]
        self._set_trainable()
        self.last_rows: list[int] = []
        self.last_prompt_attention = None

    def _attach_bank(self, bank: PriorBank | None):
        if bank is None:
            raise ValueError("point-peft with the prior bank needs a bank file")
        fp = encoder_fingerprint(self._frozen)
        if bank.fingerprint != fp:
            raise ValueError("bank fingerprint does not match the frozen encoder")
        if bank.features.shape[0] < self.cfg.prompt_len - 2:
            raise ValueError(f"bank has {bank.features.shape[0]} rows, needs >= K-2 = {self.cfg.prompt_len - 2}")
        self._bank = bank

    def _set_trainable(self):
        m = self.method
        for name, p in self.named_parameters():
            if name.startswith("head."):
                p.trainable = True
            elif name.startswith("encoder."):
                if m == "full":
                    p.trainable = True
                elif m == "bias" or (m == "point-peft" and self.cfg.tune_bias):
                    p.trainable = is_block_bias(name)
                else:
                    p.trainable = False
            elif name.startswith("prompt.coords"):
                p.trainable = self.cfg.learnable_coords
            else:
                p.trainable = True

    # -- forward -----------------------------------------------------------

    def prompt_prior(self, points: np.ndarray, tokens: TokenSet | None = None) -> Tensor:
        """P_prior for a batch: bottleneck MLP over [F_T; F_A; X_sel]. (B, K, D)."""
        f_t = encoder_feature(self._frozen, points, tokens)
        f_a, x_sel, _, _ = prior_attention(f_t, self._bank.features, self.cfg.prompt_len, self.cfg.softmax_scale)
        rows = np.concatenate([f_t[:, None, :], f_a[:, None, :], x_sel], axis=1).astype(self.dtype)
        return self.prompt.prior_mlp(Tensor(rows))

    def make_prompt(self, i: int, prior: Tensor | None, B: int) -> Tensor:
        if i >= self.cfg.prompt_depth:
            raise IndexError(f"no prompt for block {i}: prompt depth is {self.cfg.prompt_depth}")
        R = self.prompt.R[i]
        base = prior if prior is not None else Tensor(np.zeros((B,) + R.shape, self.dtype))
        return T.add(base, R)

    def _adapt(self, j: int, feats: Tensor, coords: Tensor, K: int) -> Tensor:
        ad = self.adapter
        out = geometry_adapter(
            TokenSet(feats, coords, K), ad.blocks[j], ad.shared_attn, self.cfg,
            getattr(ad, "alpha", None), getattr(ad, "beta", None),
        )
        return out.feats

    def features(self, points: np.ndarray, start=0) -> Tensor:
        """Final point-token features (B, M, D) after all blocks and the final norm."""
        points = np.asarray(points, dtype=self.dtype)
        cfg = self.cfg
        enc = self.encoder
        toks = enc.tokenize(points, start)
        x = enc.embed(toks)
        coords = toks.coords
        B = points.shape[0]
        prior = None
        if self._prompts_on and self._bank is not None:
            # a frozen tokenizer matches the snapshot's, so its patches can be reused
            frozen_tok = not any(p.trainable for p in enc.tokenizer.parameters())
            shared = toks if frozen_tok else None
            prior = self.prompt_prior(points, shared)
        ad_depth = cfg.resolved_adapter_depth(self.enc_cfg.depth) if self._adapter_on else 0
        self.last_rows = []
        for i, blk in enumerate(enc.blocks):
            K = 0
            feats, c = x, coords
            if self._prompts_on and i < cfg.prompt_depth:
                P = self.make_prompt(i, prior, B)
                K = P.shape[1]
                pc = T.add(Tensor(np.zeros((B, K, 3), self.dtype)), self.prompt.coords_for(i))
                feats, c = T.concat([P, x], axis=1), T.concat([pc, coords], axis=1)
            elif self.method == "prompt":
                P = T.add(Tensor(np.zeros((B,) + self.vpt[i].shape, self.dtype)), self.vpt[i])
                K = P.shape[1]
                feats = T.concat([P, x], axis=1)
            self.last_rows.append(feats.shape[1])

            lora = self.lora[i] if self.method == "lora" else None
            h = blk.attend(feats, lora.q if lora else None, lora.v if lora else None)
            if K and self._prompts_on:
                w = blk.attn.last_weights  # B,H,L,L
                self.last_prompt_attention = w[:, :, :K, K:].mean(axis=1)

            if i < ad_depth:
                pos = cfg.adapter_position
                if pos == "after":
                    h = T.add(h, blk.feed(h))
                    h = self._adapt(i, h, c, K)
                elif pos == "before":
                    h = self._adapt(i, h, c, K)
                    h = T.add(h, blk.feed(h))
                elif pos == "both":
                    h = self._adapt(2 * i, h, c, K)
                    h = T.add(h, blk.feed(h))
                    h = self._adapt(2 * i + 1, h, c, K)
                else:  # parallel
                    h = T.add(self._adapt(i, h, c, K), blk.feed(h))
            else:
                h = T.add(h, blk.feed(h))
                if self.method == "adapter":
                    h = self.vadapter[i](h)
            x = T.slice_axis(h, K, h.shape[1], axis=1) if K else h
        self.last_tokens = x.data
        self.last_coords = coords.data
        return enc.norm(x)

    def __call__(self, points: np.ndarray, start=0) -> Tensor:
        return self.head(global_feature(self.features(points, start)))

    # -- persistence ---------------------------------------------------------

    def to_container(self, fields_: dict | None = None) -> ckpt.Container:
        c = ckpt.Container()
        for name, p in self.named_parameters():
            c.add_tensor(name, p.data, p.trainable)
        for name, p in self._frozen.named_parameters("frozen.encoder."):
            c.add_tensor(name, p.data, False)
        if self._bank is not None:
            c.add_tensor("bank.features", self._bank.features)
            c.strings["bank.ids"] = list(self._bank.sample_ids)
            c.fields["bank.fingerprint"] = self._bank.fingerprint
        for k, v in (fields_ or {}).items():
            c.fields[k] = v
        return c

    def load_container(self, c: ckpt.Container) -> None:
        state = {n: a for n, (a, _) in c.tensors.items()
                 if not n.startswith("frozen.") and not n.startswith("bank.")}
        self.load_state_dict(state)
        frozen = {n[len("frozen.encoder."):]: a for n, (a, _) in c.tensors.items() if n.startswith("frozen.encoder.")}
        if frozen:
            self._frozen.load_state_dict(frozen)


def is_block_bias(name: str) -> bool:
    return name.startswith("encoder.blocks.") and name.endswith(".bias")


def attach_peft(base: PointTransformer, method: str, cfg: PeftConfig | None = None,
                bank: PriorBank | None = None, seed: int = 0, require_bank: bool = True) -> PeftModel:
    """Wrap ``base`` with ``method``. ``require_bank=False`` is for counting only."""
    return PeftModel(base, method, cfg or PeftConfig(), bank, seed, require_bank)


# ---------------------------------------------------------------------------
# parameter accounting

GROUPS = ("prompts", "adapter", "head", "biases", "backbone")


def param_group(name: str) -> str:
    if name.startswith(("prompt.", "vpt.")):
        return "prompts"
    if name.startswith(("adapter.", "vadapter.", "lora.")):
        return "adapter"
    if name.startswith("head."):
        return "head"
    if is_block_bias(name):
        return "biases"
    return "backbone"


def count_trainable(model: Module) -> dict:
    """Exact per-group trainable/total counts and the trainable ratio."""
    trainable = {g: 0 for g in GROUPS}
    total = {g: 0 for g in GROUPS}
    for name, p in model.named_parameters():
        g = param_group(name)
        total[g] += p.data.size
        if p.trainable:
            trainable[g] += p.data.size
    n_tr, n_tot = sum(trainable.values()), sum(total.values())
    return {"trainable_by_group": trainable, "total_by_group": total,
            "trainable": n_tr, "total": n_tot, "ratio": n_tr / n_tot}


def peft_param_formula(enc: EncoderConfig, cfg: PeftConfig, method: str) -> dict:
    """Closed-form trainable counts per group, mirroring ``count_trainable``."""
    D, depth = enc.dim, enc.depth
    head = 2 * D * enc.head_hidden + enc.head_hidden + enc.head_hidden * enc.num_classes + enc.num_classes
    bias_per_block = 4 * D + (enc.ffn_ratio * D + D) + 2 * D
    out = {"prompts": 0, "adapter": 0, "head": head, "biases": 0, "backbone": 0}

    def bottleneck(r):
        return 2 * r * D + r + D

    if method == "full":
        from .backbone import backbone_param_count

        bb = backbone_param_count(enc)
        out["biases"] = depth * bias_per_block
        out["backbone"] = bb["blocks"] + bb["tokenizer"] + bb["norm"] - out["biases"]
    elif method == "bias":
        out["biases"] = depth * bias_per_block
    elif method == "prompt":
        out["prompts"] = depth * cfg.prompt_len * D
    elif method == "adapter":
        out["adapter"] = depth * bottleneck(cfg.baseline_adapter_dim)
    elif method == "lora":
        out["adapter"] = depth * 4 * D * cfg.lora_rank
    elif method == "point-peft":
        K, L = cfg.prompt_len, cfg.prompt_depth
        if cfg.use_prompt:
            out["prompts"] = L * K * D
            if cfg.learnable_coords:
                out["prompts"] += 3 * K * (L if cfg.per_block_coords else 1)
            if cfg.use_bank:
                out["prompts"] += bottleneck(cfg.prompt_mlp_dim)
        if cfg.use_adapter:
            n = cfg.resolved_adapter_depth(depth) * (2 if cfg.adapter_position == "both" else 1)
            per = bottleneck(cfg.adapter_mlp_in_dim)
            if cfg.final_mlp:
                per += bottleneck(cfg.adapter_mlp_out_dim)
            attn = 4 * D * D + 4 * D
            if cfg.local_aggregation and cfg.attention:
                if cfg.shared_attention:
                    out["adapter"] += attn
                else:
                    per += attn
            out["adapter"] += n * per + (2 if cfg.learnable_balance else 0)
        if cfg.tune_bias:
            out["biases"] = depth * bias_per_block
    out["total"] = sum(out.values())
    return out
