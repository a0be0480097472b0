"""Synthetic audio-visual scenes with exact lip-audio coupling.

Three scene families: a talking face whose mouth opening tracks the audio
envelope (with ground-truth mouth boxes), a bouncing object with
impact-synchronized bursts, and envelope-only ambient audio. Both codecs
are exactly local block means, so latent-space edits have a provable pixel
footprint. Sync and transcript metrics are desk-scale stand-ins for
lip-sync confidence and word error rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mouthmask import MouthBoxPx

FAMILIES = ("avatar_speech", "video_audio", "audio_only")


@dataclass(frozen=True)
class SceneParams:
    """Grid sizes and scene-content knobs shared by all families.

    Defaults give a 16x32x32 video and a length-128 envelope over the same
    nominal clip duration. The mouth patch covers mouth_w*mouth_h pixels
    (24/1024 ~ 2.3% of the frame at defaults).
    """

    video_frames: int = 16
    height: int = 32
    width: int = 32
    audio_len: int = 128
    audio_hop: int = 4          # pulse timing snaps to this grid
    duration: float = 2.0       # seconds, shared by video and audio
    phoneme_vocab: int = 8
    transcript_min: int = 4
    transcript_max: int = 8
    pulse_hops: int = 2         # pulse length in audio hops
    mouth_w: int = 6
    mouth_h: int = 4
    mouth_dy: int = 4           # mouth center offset below face center
    face_radius: int = 10
    face_cx_buckets: tuple = (13, 16, 19)
    face_cy_buckets: tuple = (14, 17)
    bg_level: float = 0.1
    face_level: float = 0.9

    @property
    def px_per_frame(self):
        return self.audio_len // self.video_frames


@dataclass
class ToyScene:
    video_px: np.ndarray        # (T, H, W) intensities in [0, 1]
    audio_px: np.ndarray        # (L,) envelope in [0, 1]
    transcript: list
    boxes: list                 # per-frame MouthBoxPx; empty unless avatar
    family: str
    face_cx: int = -1
    face_cy: int = -1


def _pulse_layout(n_pulses, n_hops, pulse_hops, rng):
    """Random hop-aligned pulse onsets with at least one silent hop between
    pulses. Returns onset hops."""
    need = n_pulses * pulse_hops + (n_pulses - 1)
    slack = n_hops - need
    if slack < 0:
        raise ValueError(f"{n_pulses} pulses do not fit in {n_hops} hops")
    # distribute slack hops over lead gap, inner gaps, and tail
    extra = rng.multinomial(slack, np.full(n_pulses + 1, 1.0 / (n_pulses + 1)))
    onsets = []
    pos = int(extra[0])
    for i in range(n_pulses):
        onsets.append(pos)
        pos += pulse_hops + 1 + int(extra[i + 1])
    return onsets


def _envelope_from_transcript(transcript, params, rng):
    """Flat-top amplitude pulses, one per phoneme, on the hop grid.

    Amplitude encodes the phoneme id as (id+1)/vocab so the transcript is
    recoverable from the envelope by quantization.
    """
    n_hops = params.audio_len // params.audio_hop
    env = np.zeros(params.audio_len)
    if not transcript:
        return env
    onsets = _pulse_layout(len(transcript), n_hops, params.pulse_hops, rng)
    for pid, onset in zip(transcript, onsets):
        lo = onset * params.audio_hop
        hi = lo + params.pulse_hops * params.audio_hop
        env[lo:hi] = (pid + 1) / params.phoneme_vocab
    return env


def _frame_apertures(env, params):
    """Envelope resampled to the video frame rate by window mean."""
    return env.reshape(params.video_frames, params.px_per_frame).mean(axis=1)


def _render_face(scene_px, params, cx, cy):
    h, w = params.height, params.width
    yy, xx = np.mgrid[0:h, 0:w]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= params.face_radius ** 2
    scene_px[:, disc] = params.face_level


def _render_mouth(scene_px, apertures, params, cx, cy):
    """Mouth opens vertically from its center row, antialiased so the total
    darkened mass is exactly proportional to the aperture."""
    x1 = cx - params.mouth_w // 2
    y1 = cy + params.mouth_dy - params.mouth_h // 2
    rows = np.arange(params.mouth_h)
    for k, a in enumerate(apertures):
        open_px = a * params.mouth_h
        lo = (params.mouth_h - open_px) / 2.0
        hi = lo + open_px
        cover = np.clip(np.minimum(rows + 1.0, hi) - np.maximum(rows * 1.0, lo),
                        0.0, 1.0)
        patch = params.face_level * (1.0 - cover)
        scene_px[k, y1:y1 + params.mouth_h, x1:x1 + params.mouth_w] = patch[:, None]
    return x1, y1


def _avatar_boxes(params, rng, x1, y1):
    """Per-frame boxes: the mouth patch expanded by 1px plus 0-1px jitter.

    Expansion-only jitter keeps every mouth pixel covered while varying the
    box edges, which exercises the temporal min/max merge.
    """
    boxes = []
    for k in range(params.video_frames):
        j = rng.integers(0, 2, size=4)
        boxes.append(MouthBoxPx(
            frame_index=k,
            x1=x1 - 1 - int(j[0]),
            y1=y1 - 1 - int(j[1]),
            x2=x1 + params.mouth_w + 1 + int(j[2]),
            y2=y1 + params.mouth_h + 1 + int(j[3]),
        ))
    return boxes


def generate_scene(family, rng, params=SceneParams()):
    """Deterministic scene from (family, rng state, params)."""
    t, h, w = params.video_frames, params.height, params.width
    video = np.full((t, h, w), params.bg_level)

    if family == "avatar_speech":
        n = int(rng.integers(params.transcript_min, params.transcript_max + 1))
        transcript = [int(p) for p in rng.integers(0, params.phoneme_vocab, size=n)]
        env = _envelope_from_transcript(transcript, params, rng)
        cx = int(rng.choice(params.face_cx_buckets))
        cy = int(rng.choice(params.face_cy_buckets))
        _render_face(video, params, cx, cy)
        apertures = _frame_apertures(env, params)
        x1, y1 = _render_mouth(video, apertures, params, cx, cy)
        boxes = _avatar_boxes(params, rng, x1, y1)
        return ToyScene(video, env, transcript, boxes, family, cx, cy)

    if family == "video_audio":
        # bouncing block; each floor impact fires a one-hop envelope burst
        period = int(rng.integers(4, 7))
        phase = int(rng.integers(0, period))
        size = 4
        x0 = int(rng.integers(2, w - size - 2))
        top, floor = 2, h - size - 2
        env = np.zeros(params.audio_len)
        for k in range(t):
            pos = (k + phase) % (2 * period)
            frac = pos / period if pos <= period else (2 * period - pos) / period
            y = int(round(top + (floor - top) * min(frac, 1.0)))
            video[k, y:y + size, x0:x0 + size] = params.face_level
            if pos == period:  # touches the floor
                lo = k * params.px_per_frame
                env[lo:lo + params.audio_hop] = 0.6
        return ToyScene(video, env, [], [], family)

    if family == "audio_only":
        # hop-constant ambient level walk; video stays blank
        n_hops = params.audio_len // params.audio_hop
        levels = np.clip(np.cumsum(rng.choice([-0.2, 0.0, 0.2], size=n_hops))
                         + 0.4, 0.0, 1.0)
        env = np.repeat(levels, params.audio_hop)
        video[:] = 0.0
        return ToyScene(video, env, [], [], family)

    raise ValueError(f"unknown family {family!r}")


def make_scenes(n, seed, mix, params=SceneParams()):
    """n scenes with family proportions `mix` (dict family -> weight).

    Scene i depends only on (seed, i), so datasets are reproducible and
    stable under count changes.
    """
    names = [f for f in FAMILIES if mix.get(f, 0.0) > 0.0]
    weights = np.array([mix[f] for f in names], dtype=float)
    weights /= weights.sum()
    scenes = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        family = names[int(rng.choice(len(names), p=weights))]
        scenes.append(generate_scene(family, rng, params))
    return scenes


# ---------------------------------------------------------------------------
# exactly-local block codecs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCodecSpec:
    """Block-mean codec factors; encoder/decoder are exactly local per
    s x s x t_s pixel block (and per hop window for audio)."""

    s: int = 4
    t_s: int = 2
    audio_hop: int = 4
    channels: int = 1

    exactly_local = True

    def encode_video(self, video_px):
        return encode_video(video_px, self)

    def decode_video(self, latent):
        return decode_video(latent, self)

    def encode_audio(self, env):
        return encode_audio(env, self.audio_hop)

    def decode_audio(self, latent):
        return decode_audio(latent, self.audio_hop)


def encode_video(video_px, spec):
    """Block mean over s x s x t_s cells -> (T_l, H_l, W_l, C) latent."""
    t, h, w = video_px.shape
    if t % spec.t_s or h % spec.s or w % spec.s:
        raise ValueError(
            f"video shape {video_px.shape} not divisible by factors "
            f"(s={spec.s}, t_s={spec.t_s})"
        )
    x = video_px.reshape(t // spec.t_s, spec.t_s,
                         h // spec.s, spec.s,
                         w // spec.s, spec.s)
    return x.mean(axis=(1, 3, 5))[..., None]


def decode_video(latent, spec):
    """Nearest (block-constant) upsampling back to pixels."""
    lat = latent[..., 0]
    out = np.repeat(lat, spec.t_s, axis=0)
    out = np.repeat(out, spec.s, axis=1)
    return np.repeat(out, spec.s, axis=2)


def encode_audio(env, hop):
    if len(env) % hop:
        raise ValueError(f"envelope length {len(env)} not divisible by hop {hop}")
    return env.reshape(-1, hop).mean(axis=1)[:, None]


def decode_audio(latent, hop):
    return np.repeat(latent[:, 0], hop)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0  # a constant series carries no sync evidence
    return float((a * b).sum() / denom)


def sync_score(video_px, audio_env, boxes, max_offset=3):
    """Correlation between mouth-region motion and the audio envelope,
    maximized over integer frame offsets in [-max_offset, max_offset].

    Mouth motion per frame is the integrated darkness inside the union of
    the given boxes (a fixed region, so the measure is exactly affine in
    the rendered opening). The envelope is resampled to the frame rate by
    window means. Returns a value in [-1, 1].
    """
    t = video_px.shape[0]
    if t < 4:
        raise ValueError(f"sync_score needs at least 4 frames, got {t}")
    present = [b for b in boxes if b.present]
    if not present:
        raise ValueError("sync_score requires present mouth boxes")
    x1 = min(b.x1 for b in present)
    y1 = min(b.y1 for b in present)
    x2 = max(b.x2 for b in present)
    y2 = max(b.y2 for b in present)
    aperture = -video_px[:, y1:y2, x1:x2].sum(axis=(1, 2))

    if len(audio_env) % t:
        raise ValueError(
            f"envelope length {len(audio_env)} not divisible by {t} frames"
        )
    env = audio_env.reshape(t, -1).mean(axis=1)

    best = -1.0
    for off in range(-max_offset, max_offset + 1):
        # pair aperture[k] with env[k - off] on the valid overlap
        if off >= 0:
            a, e = aperture[off:], env[:t - off] if off else env
        else:
            a, e = aperture[:t + off], env[-off:]
        if len(a) < 4:
            continue
        best = max(best, _pearson(a, e))
    return best


def _levenshtein(a, b):
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[m]


def transcript_error(audio_env, transcript, params=SceneParams(), min_run=2):
    """Edit distance between pulses decoded from the envelope and the
    transcript, normalized by transcript length.

    Pulses are threshold runs; each run's median amplitude is quantized
    back to a phoneme id. An empty transcript yields the raw insertion
    count.
    """
    if not np.all(np.isfinite(audio_env)):
        raise ValueError("envelope contains non-finite values")
    thresh = 0.5 / params.phoneme_vocab
    above = audio_env > thresh
    decoded = []
    i = 0
    n = len(above)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j < n and above[j]:
            j += 1
        if j - i >= min_run:
            level = float(np.median(audio_env[i:j]))
            pid = int(round(level * params.phoneme_vocab - 1.0))
            decoded.append(max(0, min(params.phoneme_vocab - 1, pid)))
        i = j
    if not transcript:
        return float(len(decoded))
    return _levenshtein(decoded, list(transcript)) / len(transcript)
