"""Toy-scale context-infused vision encoder and shared role-token text encoder."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from enum import IntEnum

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

N_OBSERVATIONS = 14
MASK_FILL = -1e9


class ViewPosition(IntEnum):
    PA = 0
    AP = 1
    LATERAL = 2
    UNKNOWN = 3

    @classmethod
    def parse(cls, tag) -> "ViewPosition":
        """Accepts members, integer ids and DICOM-style tags; missing -> UNKNOWN."""
        if tag is None or tag == "":
            return cls.UNKNOWN
        if isinstance(tag, (int, np.integer)):
            return cls(int(tag))
        key = str(tag).strip().upper()
        key = {"LAT": "LATERAL", "LL": "LATERAL", "RL": "LATERAL"}.get(key, key)
        if key not in cls.__members__:
            raise ValueError(f"unknown view position {tag!r}")
        return cls[key]


class RoleToken(IntEnum):
    FINDINGS = 0
    TRANSCRIPT = 1
    INDICATION = 2
    HISTORY = 3


@dataclass
class ModelConfig:
    d: int = 32
    m: int = 8
    patch_size: int = 8
    image_size: int = 32
    layers: int = 2
    heads: int = 2
    vocab_size: int = 256
    max_len: int = 64
    ff_mult: int = 2

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class ParamStore:
    """Ordered name -> Parameter registry with seeded initialization."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}

    def _add(self, name, data) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def uniform(self, name, shape, fan_in) -> Parameter:
        bound = 1.0 / np.sqrt(fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape) -> Parameter:
        return self._add(name, np.zeros(shape))

    def ones(self, name, shape) -> Parameter:
        return self._add(name, np.ones(shape))

    def constant(self, name, value) -> Parameter:
        return self._add(name, np.array(value, dtype=np.float64))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.weight = store.uniform(f"{name}.weight", (d_in, d_out), d_in)
        self.bias = store.zeros(f"{name}.bias", (d_out,))

    def __call__(self, x):
        return nx.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.ones(f"{name}.gamma", (d,))
        self.beta = store.zeros(f"{name}.beta", (d,))

    def __call__(self, x):
        return nx.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    def __init__(self, store, name, d, mult):
        self.fc1 = Linear(store, f"{name}.fc1", d, d * mult)
        self.fc2 = Linear(store, f"{name}.fc2", d * mult, d)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class Attention:
    """Multi-head scaled dot-product attention from queries onto keys/values."""

    def __init__(self, store, name, d, heads):
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.heads, self.dh = heads, d // heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.out = Linear(store, f"{name}.out", d, d)
        self.last_weights: np.ndarray | None = None

    def _split(self, x):
        b, n, _ = x.shape
        return nx.transpose(nx.reshape(x, (b, n, self.heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, queries, inputs, key_mask=None):
        """queries: B x nq x d, inputs: B x nk x d, key_mask: B x nk (True = valid)."""
        b, nq, d = queries.shape
        q, k, v = self._split(self.q(queries)), self._split(self.k(inputs)), self._split(self.v(inputs))
        scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.dh))
        if key_mask is not None:
            scores = nx.masked_fill(scores, ~key_mask[:, None, None, :], MASK_FILL)
        weights = nx.softmax(scores, axis=-1)
        self.last_weights = weights.data
        mixed = nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3))
        return self.out(nx.reshape(mixed, (b, nq, d)))


class SelfAttentionBlock:
    def __init__(self, store, name, d, heads, mult):
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.attn = Attention(store, f"{name}.attn", d, heads)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.ff = FeedForward(store, f"{name}.ff", d, mult)

    def __call__(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock:
    """One Perceiver round: latents attend to inputs, then a feed-forward."""

    def __init__(self, store, name, d, heads, mult):
        self.norm_q = LayerNorm(store, f"{name}.norm_q", d)
        self.norm_kv = LayerNorm(store, f"{name}.norm_kv", d)
        self.attn = Attention(store, f"{name}.attn", d, heads)
        self.norm_ff = LayerNorm(store, f"{name}.norm_ff", d)
        self.ff = FeedForward(store, f"{name}.ff", d, mult)

    def __call__(self, latents, inputs, mask=None):
        latents = latents + self.attn(self.norm_q(latents), self.norm_kv(inputs), mask)
        return latents + self.ff(self.norm_ff(latents))


class Perceiver:
    def __init__(self, store, name, d, heads, layers, mult):
        self.blocks = [CrossAttentionBlock(store, f"{name}.{i}", d, heads, mult)
                       for i in range(layers)]

    def __call__(self, latents, inputs, mask=None):
        """latents: B x m x d, inputs: B x n x d -> B x m x d."""
        if inputs.shape[1] == 0:
            raise ValueError("perceiver needs at least one input row")
        for block in self.blocks:
            latents = block(latents, inputs, mask)
        return latents


def perceiver_fuse(perceiver: Perceiver, latents, inputs, mask=None) -> Tensor:
    """Unbatched convenience: latents m x d, inputs n x d -> m x d."""
    latents, inputs = nx.as_tensor(latents), nx.as_tensor(inputs)
    m, d = latents.shape
    out = perceiver(nx.reshape(latents, (1, m, d)), nx.reshape(inputs, (1,) + inputs.shape),
                    None if mask is None else np.asarray(mask, dtype=bool)[None])
    return nx.reshape(out, (m, d))


def global_pool(seq, mask=None) -> Tensor:
    """Masked mean over the sequence axis followed by L2 normalization.

    Accepts ``k x d`` or batched ``B x k x d`` (with ``mask`` B x k).
    """
    seq = nx.as_tensor(seq)
    if seq.shape[-2] < 1:
        raise ValueError("cannot pool an empty sequence")
    if mask is None:
        pooled = nx.mean(seq, axis=-2)
    else:
        w = np.asarray(mask, dtype=np.float64)
        pooled = nx.tsum(seq * w[..., None], axis=-2) * (1.0 / w.sum(axis=-1, keepdims=True))
    return nx.l2_normalize(pooled)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

def _pad(seqs):
    n = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


class TextEncoder:
    """Shared language encoder; role tokens occupy the last rows of the table."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        d = cfg.d
        self.embedding = store.uniform("text.embedding", (cfg.vocab_size + len(RoleToken), d), d)
        self.position = store.uniform("text.position", (cfg.max_len, d), d)
        self.blocks = [SelfAttentionBlock(store, f"text.block{i}", d, cfg.heads, cfg.ff_mult)
                       for i in range(cfg.layers)]
        self.norm = LayerNorm(store, "text.norm", d)

    def role_id(self, role: RoleToken) -> int:
        return self.cfg.vocab_size + int(role)

    def sequence_ids(self, tokens, role: RoleToken) -> list:
        tokens = [int(t) for t in tokens]
        for t in tokens:
            if not 0 <= t < self.cfg.vocab_size:
                raise ValueError(f"unknown token id {t}")
        return [self.role_id(role)] + tokens

    def context_ids(self, indication, history) -> list:
        return (self.sequence_ids(indication, RoleToken.INDICATION)
                + self.sequence_ids(history, RoleToken.HISTORY))

    def encode_ids(self, id_lists):
        """Batch of id lists -> (B x n x d sequence embeddings, B x n validity mask)."""
        ids, mask = _pad(id_lists)
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence of length {ids.shape[1]} exceeds max_len")
        x = nx.take(self.embedding, ids) + nx.take(self.position, np.arange(ids.shape[1]))
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x), mask

    def encode_batch(self, texts, role: RoleToken):
        return self.encode_ids([self.sequence_ids(t, role) for t in texts])

    def encode_text(self, tokens, role: RoleToken) -> Tensor:
        seq, _ = self.encode_ids([self.sequence_ids(tokens, role)])
        return nx.reshape(seq, seq.shape[1:])

    def encode_context(self, indication, history) -> Tensor:
        seq, _ = self.encode_ids([self.context_ids(indication, history)])
        return nx.reshape(seq, seq.shape[1:])

    def embed_global(self, texts, role: RoleToken) -> Tensor:
        seq, mask = self.encode_batch(texts, role)
        return global_pool(seq, mask)


# ---------------------------------------------------------------------------
# vision
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """B x H x W -> B x p x patch_size**2, patches in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    b, H, W = images.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, gh * gw, patch_size * patch_size)


class VisionEncoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        d, ps = cfg.d, cfg.patch_size
        self.patch_embed = Linear(store, "vision.patch_embed", ps * ps, d)
        self.position = store.uniform("vision.position", (cfg.n_patches, d), d)
        self.view = store.uniform("vision.view", (len(ViewPosition), d), d)
        self.blocks = [SelfAttentionBlock(store, f"vision.block{i}", d, cfg.heads, cfg.ff_mult)
                       for i in range(cfg.layers)]
        self.norm = LayerNorm(store, "vision.norm", d)
        self.proj = Linear(store, "vision.proj", d, d)

    def __call__(self, images, views) -> Tensor:
        """images: B x H x W in [0, 1], views: B ViewPositions -> B x p x d patch features."""
        patches = patchify(images, self.cfg.patch_size)
        if patches.shape[1] != self.cfg.n_patches:
            raise ValueError("image size does not match the model configuration")
        b = patches.shape[0]
        view_ids = np.array([int(ViewPosition.parse(v)) for v in views], dtype=np.int64)
        x = self.patch_embed(patches) + self.position
        x = x + nx.reshape(nx.take(self.view, view_ids), (b, 1, self.cfg.d))
        for block in self.blocks:
            x = block(x)
        return self.proj(self.norm(x))

    def encode_image(self, image, view) -> Tensor:
        out = self([image], [view])
        return nx.reshape(out, out.shape[1:])


class ContextAdaptiveFusion:
    """Context latents via Z_C when context exists, else the image latent Z_I,
    then vision latents from Z_V attending over [patches ; context latents]."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        m, d = cfg.m, cfg.d
        self.z_context = store.uniform("fusion.z_context", (m, d), d)
        self.z_image = store.uniform("fusion.z_image", (m, d), d)
        self.z_vision = store.uniform("fusion.z_vision", (m, d), d)
        self.context_perceiver = Perceiver(store, "fusion.context", d, cfg.heads, cfg.layers, cfg.ff_mult)
        self.vision_perceiver = Perceiver(store, "fusion.vision", d, cfg.heads, cfg.layers, cfg.ff_mult)

    def context_latents(self, context_seq, context_mask, has_context) -> Tensor:
        """B x m x d; rows without context are exactly Z_I."""
        has_context = np.asarray(has_context, dtype=bool)
        b, (m, d) = has_context.size, (self.cfg.m, self.cfg.d)
        k = int(has_context.sum())
        parts, order = [], np.empty(b, dtype=np.int64)
        order[has_context] = np.arange(k)
        order[~has_context] = k + np.arange(b - k)
        if k:
            parts.append(self.context_perceiver(
                nx.expand(self.z_context, (k, m, d)), context_seq, context_mask))
        if b - k:
            parts.append(nx.expand(self.z_image, (b - k, m, d)))
        stacked = parts[0] if len(parts) == 1 else nx.concat(parts, axis=0)
        if k == 0 or k == b:
            return stacked
        return nx.take(stacked, order)

    def __call__(self, patches, context_latents) -> Tensor:
        b = patches.shape[0]
        kv = nx.concat([patches, context_latents], axis=1)
        return self.vision_perceiver(nx.expand(self.z_vision, (b, self.cfg.m, self.cfg.d)), kv)


@dataclass
class EncodedStudyBatch:
    vision_latents: Tensor       # b x m x d
    vision_global: Tensor        # b x d
    report_global: Tensor        # b x d
    patch_features: Tensor       # b x p x d
    vision_logits: Tensor        # b x 14
    text_logits: Tensor          # b x 14
    study_ids: list
    transcript_global: dict      # batch row -> n x d Tensor
    context_latents: Tensor | None = None


class VisionLanguageModel:
    """All trainable pieces plus the two log-scale temperatures."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(seed)
        self.text = TextEncoder(self.store, cfg)
        self.vision = VisionEncoder(self.store, cfg)
        self.fusion = ContextAdaptiveFusion(self.store, cfg)
        self.head_vision = Linear(self.store, "heads.vision", cfg.d, N_OBSERVATIONS)
        self.head_text = Linear(self.store, "heads.text", cfg.d, N_OBSERVATIONS)
        log_inv_tau = np.log(1.0 / 0.07)
        self.log_tau_contrastive = self.store.constant("temperature.contrastive", log_inv_tau)
        self.log_tau_gaze = self.store.constant("temperature.gaze", log_inv_tau)

    # -- parameter plumbing --------------------------------------------------
    @property
    def params(self) -> dict:
        return self.store.params

    def parameters(self):
        return list(self.store.params.values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_arrays(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def context_parameter_names(self) -> list:
        return [n for n in self.params if n.startswith(("fusion.z_context", "fusion.context."))]

    # -- forward pieces --------------------------------------------------------
    def encode_patches(self, images, views) -> Tensor:
        return self.vision(images, views)

    def encode_vision(self, images, views, contexts):
        """contexts: per image ``None`` or ``(indication, history)`` token lists.

        Returns (patch features, context latents, vision latents, vision global).
        """
        patches = self.vision(images, views)
        has_context = np.array([c is not None for c in contexts], dtype=bool)
        ctx_seq = ctx_mask = None
        if has_context.any():
            ctx_seq, ctx_mask = self.text.encode_ids(
                [self.text.context_ids(*c) for c in contexts if c is not None])
        cbar = self.fusion.context_latents(ctx_seq, ctx_mask, has_context)
        latents = self.fusion(patches, cbar)
        return patches, cbar, latents, global_pool(latents)

    def embed_reports(self, reports) -> Tensor:
        return self.text.embed_global(reports, RoleToken.FINDINGS)

    def embed_transcript(self, segments) -> Tensor:
        """Per-segment token lists (sentences plus paragraph) -> n x d global rows."""
        return self.text.embed_global(segments, RoleToken.TRANSCRIPT)

    def disease_heads(self, vision_global, report_global):
        return self.head_vision(vision_global), self.head_text(report_global)

    def forward(self, images, views, contexts, reports, study_ids, transcripts=None) -> EncodedStudyBatch:
        patches, cbar, latents, xg = self.encode_vision(images, views, contexts)
        rg = self.embed_reports(reports)
        logits_v, logits_t = self.disease_heads(xg, rg)
        tg = {row: self.embed_transcript(segs) for row, segs in (transcripts or {}).items()}
        return EncodedStudyBatch(
            vision_latents=latents, vision_global=xg, report_global=rg,
            patch_features=patches, vision_logits=logits_v, text_logits=logits_t,
            study_ids=list(study_ids), transcript_global=tg, context_latents=cbar)
