"""Joint video-audio velocity network.

Latents are tokenized per modality, text ids are embedded, and everything
flows through a two-stage transformer: multi-stream blocks keep separate
per-modality parameters, single-stream blocks share one set. Fusion modes:

* joint        - one self-attention over the concatenated video/audio/text
                 tokens (the default architecture),
* cross_linear - per-modality self-attention plus video<->audio
                 cross-attention that reuses the same projections, adapted
                 by a zero-initialized linear layer,
* cross_plain  - same, with the cross output added directly.

Rotary positions are computed from absolute token time (temporal_aligned)
so co-temporal video and audio tokens share phases, or from within-modality
frame indices (per_modality). Text tokens are never rotated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROPE_MODES = ("temporal_aligned", "per_modality")
FUSIONS = ("joint", "cross_linear", "cross_plain")


class ConfigError(ValueError):
    """Model/experiment configuration is internally inconsistent."""


@dataclass
class ModelConfig:
    token_dim: int = 128
    num_heads: int = 4
    multi_stream_depth: int = 2
    single_stream_depth: int = 2
    video_patch: tuple = (2, 2)
    text_vocab_size: int = 24
    rope_mode: str = "temporal_aligned"
    fusion: str = "joint"
    fps_latent: float = 4.0
    audio_rate_latent: float = 16.0
    condition_dropout_prob: float = 0.1
    rope_base: float = 10000.0
    max_text_len: int = 16
    ffn_mult: int = 4

    def __post_init__(self):
        if self.token_dim % (2 * self.num_heads):
            raise ConfigError(
                f"token_dim {self.token_dim} must be divisible by "
                f"2 * num_heads ({2 * self.num_heads})"
            )
        if self.multi_stream_depth < 1 or self.single_stream_depth < 1:
            raise ConfigError("stage depths must be >= 1")
        if self.fps_latent <= 0 or self.audio_rate_latent <= 0:
            raise ConfigError("latent rates must be > 0")
        if self.rope_mode not in ROPE_MODES:
            raise ConfigError(f"rope_mode {self.rope_mode!r} not in {ROPE_MODES}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion {self.fusion!r} not in {FUSIONS}")

    @property
    def head_dim(self):
        return self.token_dim // self.num_heads

    @property
    def null_text_id(self):
        return self.text_vocab_size - 1  # reserved learned null token


@dataclass
class TokenSequence:
    """One modality's token run: features plus per-token timing.

    times are absolute seconds (0 for text); indices are within-modality
    frame indices. For the combined text sequence, text_split records the
    (video-branch, audio-branch) segment lengths.
    """

    tokens: Tensor
    times: np.ndarray
    indices: np.ndarray
    modality: str
    text_split: tuple = None

    def __post_init__(self):
        if self.n == 0:
            raise ConfigError("TokenSequence must hold at least one token")

    @property
    def n(self):
        return self.tokens.shape[0]

    def with_tokens(self, tokens):
        return replace(self, tokens=tokens)


@dataclass
class ConditionSet:
    """Text ids for both branches, optional reference latent, timestep."""

    video_text: np.ndarray
    audio_text: np.ndarray
    ref_latent: np.ndarray = None   # (H_l, W_l, C), matches video latent
    t: float = 0.0

    def __post_init__(self):
        self.video_text = np.asarray(self.video_text, dtype=np.int64)
        self.audio_text = np.asarray(self.audio_text, dtype=np.int64)
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError(f"timestep {self.t} outside [0, 1]")


# ---------------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------------

def _rope_cos_sin(seq, cfg):
    """Per-token rotation cos/sin of shape (n, 1, head_dim/2)."""
    m = cfg.head_dim // 2
    freqs = cfg.rope_base ** (-np.arange(m) / m)
    if cfg.rope_mode == "temporal_aligned":
        # shared clock: positions are seconds scaled by the finest latent rate
        pos = seq.times * max(cfg.fps_latent, cfg.audio_rate_latent)
    else:
        pos = seq.indices.astype(float)
    angles = pos[:, None] * freqs[None, :]
    return np.cos(angles)[:, None, :], np.sin(angles)[:, None, :]


def _apply_rope(x, seq, cfg):
    """Rotate a (n, D) tensor per head; text passes through unrotated."""
    if seq.modality == "text":
        return x
    n = x.shape[0]
    cos, sin = _rope_cos_sin(seq, cfg)
    xh = T.reshape(x, (n, cfg.num_heads, cfg.head_dim))
    xh = T.rotate_pairs(xh, cos, sin)
    return T.reshape(xh, (n, cfg.token_dim))


def rope_rotate(seq, cfg):
    """The positional rotation as a standalone map on a TokenSequence."""
    return seq.with_tokens(_apply_rope(seq.tokens, seq, cfg))


# ---------------------------------------------------------------------------
# attention blocks
# ---------------------------------------------------------------------------

class BlockParams:
    """Named-parameter view for one block; maps modality -> stream params."""

    def __init__(self, params, prefix, shared):
        self.params = params
        self.prefix = prefix
        self.shared = shared

    def stream(self, modality):
        return "shared" if self.shared else modality

    def get(self, modality, key):
        return self.params[f"{self.prefix}.{self.stream(modality)}.{key}"]


def _heads(x, cfg):
    n = x.shape[0]
    xh = T.reshape(x, (n, cfg.num_heads, cfg.head_dim))
    return T.transpose(xh, (1, 0, 2))   # (H, n, dh)


def _merge_heads(x, cfg):
    n = x.shape[1]
    xh = T.transpose(x, (1, 0, 2))
    return T.reshape(xh, (n, cfg.token_dim))


def _attend(q, k, v, cfg):
    """Scaled dot-product attention over already-rotated projections."""
    qh, kh, vh = _heads(q, cfg), _heads(k, cfg), _heads(v, cfg)
    logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))),
                     1.0 / np.sqrt(cfg.head_dim))
    weights = T.softmax(logits, axis=-1)
    return _merge_heads(T.matmul(weights, vh), cfg)


def _qkv(seq, bp, cfg):
    """Pre-norm + projections + rotary for one segment."""
    st = seq.modality
    h = T.rms_norm(seq.tokens, bp.get(st, "attn_norm"))
    q = _apply_rope(T.matmul(h, bp.get(st, "wq")), seq, cfg)
    k = _apply_rope(T.matmul(h, bp.get(st, "wk")), seq, cfg)
    v = T.matmul(h, bp.get(st, "wv"))
    return q, k, v


def _ffn(x, bp, modality, cfg):
    h = T.rms_norm(x, bp.get(modality, "ffn_norm"))
    h = T.gelu(T.add(T.matmul(h, bp.get(modality, "ffn_w1")),
                     bp.get(modality, "ffn_b1")))
    return T.add(T.matmul(h, bp.get(modality, "ffn_w2")),
                 bp.get(modality, "ffn_b2"))


def _finish(seq, attn_out, bp, cfg):
    """Output projection + residual, then FFN + residual."""
    st = seq.modality
    h1 = T.add(seq.tokens, T.matmul(attn_out, bp.get(st, "wo")))
    h2 = T.add(h1, _ffn(h1, bp, st, cfg))
    return seq.with_tokens(h2)


def joint_block(seq_v, seq_a, seq_t, bp, cfg):
    """Shared self-attention over the concatenation of all given segments,
    then per-segment output projection, residual, and FFN (pre-norm).

    Absent modalities are passed as None; with a single segment this is
    plain self-attention.
    """
    segs = [s for s in (seq_v, seq_a, seq_t) if s is not None]
    if not segs:
        raise ConfigError("joint_block needs at least one segment")
    qs, ks, vs = zip(*(_qkv(s, bp, cfg) for s in segs))
    q, k, v = T.concat(qs), T.concat(ks), T.concat(vs)
    att = _attend(q, k, v, cfg)
    outs = T.split(att, [s.n for s in segs])
    new = [_finish(s, o, bp, cfg) for s, o in zip(segs, outs)]
    it = iter(new)
    return tuple(next(it) if s is not None else None
                 for s in (seq_v, seq_a, seq_t))


def _split_text(seq_t):
    if seq_t is None:
        return None, None
    if seq_t.text_split is None:
        raise ConfigError("combined text sequence lacks its branch split")
    n_v, n_a = seq_t.text_split
    parts = T.split(seq_t.tokens, [n_v, n_a])
    out = []
    for lo, hi, part in ((0, n_v, parts[0]), (n_v, n_v + n_a, parts[1])):
        if hi == lo:
            out.append(None)
            continue
        out.append(TokenSequence(part, seq_t.times[lo:hi],
                                 seq_t.indices[lo:hi], "text"))
    return out[0], out[1]


def _merge_text(tv, ta, seq_t):
    parts = [s.tokens for s in (tv, ta) if s is not None]
    merged = parts[0] if len(parts) == 1 else T.concat(parts)
    return seq_t.with_tokens(merged)


def cross_block(seq_v, seq_a, seq_t, bp, cfg, variant):
    """Per-modality self-attention (own tokens + own text) plus parallel
    video<->audio cross-attention reusing the same projections.

    cross_linear adapts the cross output with a zero-initialized linear
    layer before the add; cross_plain adds it directly. With an absent
    counterpart modality both variants degenerate to self-attention.
    """
    if variant not in ("cross_linear", "cross_plain"):
        raise ConfigError(f"unknown cross variant {variant!r}")
    tv, ta = _split_text(seq_t)

    proj = {}
    for s in (seq_v, seq_a, tv, ta):
        if s is not None:
            proj[id(s)] = _qkv(s, bp, cfg)

    def branch(own, text, other):
        if own is None:
            return None, None
        group = [s for s in (own, text) if s is not None]
        q = T.concat([proj[id(s)][0] for s in group]) if len(group) > 1 else proj[id(own)][0]
        k = T.concat([proj[id(s)][1] for s in group]) if len(group) > 1 else proj[id(own)][1]
        v = T.concat([proj[id(s)][2] for s in group]) if len(group) > 1 else proj[id(own)][2]
        self_out = T.split(_attend(q, k, v, cfg), [s.n for s in group])
        cross = None
        if other is not None:
            q_own = proj[id(own)][0]
            _, k_o, v_o = proj[id(other)]
            cross = _attend(q_own, k_o, v_o, cfg)
        return self_out, cross

    v_self, v_cross = branch(seq_v, tv, seq_a)
    a_self, a_cross = branch(seq_a, ta, seq_v)

    def finish_main(seq, self_out, cross):
        st = seq.modality
        mixed = T.matmul(self_out, bp.get(st, "wo"))
        if cross is not None:
            cross_mixed = T.matmul(cross, bp.get(st, "wo"))
            if variant == "cross_linear":
                cross_mixed = T.matmul(cross_mixed, bp.get(st, "cross_w"))
            mixed = T.add(mixed, cross_mixed)
        h1 = T.add(seq.tokens, mixed)
        return seq.with_tokens(T.add(h1, _ffn(h1, bp, st, cfg)))

    new_v = new_a = None
    new_tv, new_ta = tv, ta
    if seq_v is not None:
        new_v = finish_main(seq_v, v_self[0], v_cross)
        if tv is not None:
            new_tv = _finish(tv, v_self[1], bp, cfg)
    if seq_a is not None:
        new_a = finish_main(seq_a, a_self[0], a_cross)
        if ta is not None:
            new_ta = _finish(ta, a_self[1], bp, cfg)
    new_t = None if seq_t is None else _merge_text(new_tv, new_ta, seq_t)
    return new_v, new_a, new_t


# ---------------------------------------------------------------------------
# the full network
# ---------------------------------------------------------------------------

def timestep_features(t, dim):
    """Sinusoidal features of a scalar timestep in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * 1000.0 * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class Model:
    """Parameter container plus the tokenize -> blocks -> detokenize map."""

    def __init__(self, cfg, video_latent_shape, audio_latent_shape,
                 seed=0, dtype=np.float64):
        self.cfg = cfg
        self.video_latent_shape = tuple(video_latent_shape)  # (T, H, W, C)
        self.audio_latent_shape = tuple(audio_latent_shape)  # (T_a, C_a)
        t_v, h_l, w_l, c_v = self.video_latent_shape
        ph, pw = cfg.video_patch
        if h_l % ph or w_l % pw:
            raise ConfigError(
                f"latent grid {h_l}x{w_l} not divisible by patch {ph}x{pw}"
            )
        self.n_patches = (h_l // ph) * (w_l // pw)
        self.dtype = dtype
        self.params = {}
        self._init_params(seed)

    def _add(self, name, arr):
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        d = cfg.token_dim
        t_v, h_l, w_l, c_v = self.video_latent_shape
        ph, pw = cfg.video_patch
        c_a = self.audio_latent_shape[1]

        def nrm(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        self._add("tok.video.w", nrm(ph * pw * 2 * c_v, d))
        self._add("tok.video.b", np.zeros(d))
        self._add("tok.video.pos", nrm(self.n_patches, d))
        self._add("tok.audio.w", nrm(c_a, d))
        self._add("tok.audio.b", np.zeros(d))
        self._add("tok.text.embed", nrm(cfg.text_vocab_size, d))
        self._add("tok.text.pos", nrm(cfg.max_text_len, d))
        self._add("time.w1", nrm(d, d))
        self._add("time.b1", np.zeros(d))
        self._add("time.w2", nrm(d, d))
        self._add("time.b2", np.zeros(d))

        depth = cfg.multi_stream_depth + cfg.single_stream_depth
        for i in range(depth):
            shared = i >= cfg.multi_stream_depth
            streams = ("shared",) if shared else ("video", "audio", "text")
            for st in streams:
                p = f"blk{i}.{st}"
                self._add(f"{p}.attn_norm", np.ones(d))
                for w in ("wq", "wk", "wv", "wo"):
                    self._add(f"{p}.{w}", nrm(d, d))
                if cfg.fusion == "cross_linear" and st != "text":
                    self._add(f"{p}.cross_w", np.zeros((d, d)))
                self._add(f"{p}.ffn_norm", np.ones(d))
                self._add(f"{p}.ffn_w1", nrm(d, cfg.ffn_mult * d))
                self._add(f"{p}.ffn_b1", np.zeros(cfg.ffn_mult * d))
                self._add(f"{p}.ffn_w2", nrm(cfg.ffn_mult * d, d))
                self._add(f"{p}.ffn_b2", np.zeros(d))

        self._add("out.video.norm", np.ones(d))
        self._add("out.video.w", np.zeros((d, ph * pw * c_v)))
        self._add("out.video.b", np.zeros(ph * pw * c_v))
        self._add("out.audio.norm", np.ones(d))
        self._add("out.audio.w", np.zeros((d, c_a)))
        self._add("out.audio.b", np.zeros(c_a))

    def block_params(self, i):
        return BlockParams(self.params, f"blk{i}",
                           shared=i >= self.cfg.multi_stream_depth)

    # -- tokenization ------------------------------------------------------

    def _time_embed(self, t):
        feats = Tensor(timestep_features(t, self.cfg.token_dim).astype(self.dtype))
        h = T.gelu(T.add(T.matmul(T.reshape(feats, (1, -1)), self.params["time.w1"]),
                         self.params["time.b1"]))
        h = T.add(T.matmul(h, self.params["time.w2"]), self.params["time.b2"])
        return T.reshape(h, (-1,))

    def _patchify(self, v_lat, ref):
        t_v, h_l, w_l, c = self.video_latent_shape
        ph, pw = self.cfg.video_patch
        nh, nw = h_l // ph, w_l // pw
        x = v_lat.reshape(t_v, nh, ph, nw, pw, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(t_v * nh * nw, ph * pw * c)
        if ref is None:
            ref = np.zeros((h_l, w_l, c))
        r = ref.reshape(nh, ph, nw, pw, c)
        r = r.transpose(0, 2, 1, 3, 4).reshape(nh * nw, ph * pw * c)
        r = np.tile(r, (t_v, 1))
        return np.concatenate([x, r], axis=1).astype(self.dtype)

    def tokenize(self, v_lat, a_lat, cond, t, drop_text=False):
        """Latents + condition -> (video, audio, text) token sequences.

        Video patches are channel-concatenated with the reference latent
        (zeros when absent) before projection; the timestep embedding is
        added to every non-text token. With drop_text the two text id runs
        are both replaced by the learned null token.
        """
        cfg = self.cfg
        if v_lat.shape != self.video_latent_shape:
            raise ConfigError(
                f"video latent {v_lat.shape} != {self.video_latent_shape}"
            )
        if a_lat.shape != self.audio_latent_shape:
            raise ConfigError(
                f"audio latent {a_lat.shape} != {self.audio_latent_shape}"
            )
        if cond.ref_latent is not None and \
                cond.ref_latent.shape != self.video_latent_shape[1:]:
            raise ConfigError(
                f"reference latent {cond.ref_latent.shape} != "
                f"{self.video_latent_shape[1:]}"
            )
        t_v = self.video_latent_shape[0]
        t_a = self.audio_latent_shape[0]
        time_emb = self._time_embed(t)

        vx = self._patchify(v_lat, cond.ref_latent)
        vtok = T.add(T.matmul(Tensor(vx), self.params["tok.video.w"]),
                     self.params["tok.video.b"])
        pos = T.concat([self.params["tok.video.pos"]] * t_v)
        vtok = T.add(T.add(vtok, pos), time_emb)
        v_idx = np.repeat(np.arange(t_v), self.n_patches)
        seq_v = TokenSequence(vtok, v_idx / cfg.fps_latent, v_idx, "video")

        atok = T.add(T.matmul(Tensor(a_lat.astype(self.dtype)),
                              self.params["tok.audio.w"]),
                     self.params["tok.audio.b"])
        atok = T.add(atok, time_emb)
        a_idx = np.arange(t_a)
        seq_a = TokenSequence(atok, a_idx / cfg.audio_rate_latent, a_idx, "audio")

        if drop_text:
            ids_v = np.array([cfg.null_text_id], dtype=np.int64)
            ids_a = np.array([cfg.null_text_id], dtype=np.int64)
        else:
            ids_v, ids_a = cond.video_text, cond.audio_text
        parts = []
        for ids in (ids_v, ids_a):
            if len(ids) > cfg.max_text_len:
                raise ConfigError(
                    f"text run of {len(ids)} exceeds max_text_len "
                    f"{cfg.max_text_len}"
                )
            emb = T.embedding(self.params["tok.text.embed"], ids)
            pos = T.split(self.params["tok.text.pos"],
                          [len(ids), cfg.max_text_len - len(ids)])[0]
            parts.append(T.add(emb, pos))
        ttok = T.concat(parts)
        n_t = len(ids_v) + len(ids_a)
        seq_t = TokenSequence(ttok, np.zeros(n_t), np.zeros(n_t, dtype=int),
                              "text", text_split=(len(ids_v), len(ids_a)))
        return seq_v, seq_a, seq_t

    # -- forward paths -----------------------------------------------------

    def _run_blocks(self, seq_v, seq_a, seq_t, fused):
        cfg = self.cfg
        depth = cfg.multi_stream_depth + cfg.single_stream_depth
        for i in range(depth):
            bp = self.block_params(i)
            if fused:
                if cfg.fusion == "joint":
                    seq_v, seq_a, seq_t = joint_block(seq_v, seq_a, seq_t, bp, cfg)
                else:
                    seq_v, seq_a, seq_t = cross_block(seq_v, seq_a, seq_t,
                                                      bp, cfg, cfg.fusion)
            else:
                # independent branches: each modality only sees its own text
                tv, ta = _split_text(seq_t)
                seq_v, _, tv = joint_block(seq_v, None, tv, bp, cfg)
                seq_a, _, ta = joint_block(seq_a, None, ta, bp, cfg)
                seq_t = _merge_text(tv, ta, seq_t)
        return seq_v, seq_a, seq_t

    def _detokenize_video(self, seq_v):
        t_v, h_l, w_l, c = self.video_latent_shape
        ph, pw = self.cfg.video_patch
        nh, nw = h_l // ph, w_l // pw
        h = T.rms_norm(seq_v.tokens, self.params["out.video.norm"])
        flat = T.add(T.matmul(h, self.params["out.video.w"]),
                     self.params["out.video.b"])
        x = T.reshape(flat, (t_v, nh, nw, ph, pw, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, (t_v, h_l, w_l, c))

    def _detokenize_audio(self, seq_a):
        h = T.rms_norm(seq_a.tokens, self.params["out.audio.norm"])
        return T.add(T.matmul(h, self.params["out.audio.w"]),
                     self.params["out.audio.b"])

    def forward(self, v_lat, a_lat, cond, t, drop_text=False, fused=True):
        """Predicted velocity fields for both modalities, as Tensors with
        exactly the input latent shapes.

        fused=False runs the stage-1 path: no attention across modalities.
        """
        seq_v, seq_a, seq_t = self.tokenize(v_lat, a_lat, cond, t, drop_text)
        seq_v, seq_a, seq_t = self._run_blocks(seq_v, seq_a, seq_t, fused)
        return self._detokenize_video(seq_v), self._detokenize_audio(seq_a)

    def velocity(self, v_lat, a_lat, cond, t, drop_text=False, fused=True):
        """forward() as plain arrays, for samplers running without a tape."""
        v, a = self.forward(v_lat, a_lat, cond, t, drop_text, fused)
        return v.data, a.data

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}"
            )
        for name, arr in arrays.items():
            if arr.shape != self.params[name].data.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {arr.shape} vs "
                    f"{self.params[name].data.shape}"
                )
            self.params[name].data = arr.astype(self.dtype)
