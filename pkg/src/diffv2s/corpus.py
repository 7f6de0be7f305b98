"""Procedural multi-speaker paired audio-visual toy corpus.

Each speaker is a pitch (f0), a smooth unit-norm band-emphasis curve
shaping their spectral envelope, and a unit-norm articulation offset
added to every video frame. Utterances are token sequences over a small
pseudo-phoneme vocabulary; audio is additive harmonic synthesis at the
speaker's f0 with a per-token formant filter, video is the token
embedding sequence plus the speaker offset plus Gaussian noise. Speaker
identity is therefore recoverable from both modalities, which is what
the downstream speaker-embedding stages rely on.

Everything derives from a master seed. Per-utterance seeds are hashed
from (master_seed, utterance id), so output is independent of the order
in which utterances are rendered.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import PersistenceError, ValidationError
from .fileio import write_f32m
from .mel import MelConfig, compute_log_mel, hz_to_mel, normalize_log_mel

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 16
    utts_per_speaker: int = 32
    content_len: int = 32  # tokens per utterance; 1 token per 40 ms video frame
    vocab_size: int = 32
    d_vis: int = 16
    visual_noise: float = 0.05
    offset_scale: float = 0.5
    f0_min: float = 90.0
    f0_max: float = 300.0
    f0_min_gap: float = 5.0
    speaker_gain: float = 9.0  # log-amplitude weight on the speaker band emphasis
    token_gain: float = 1.5
    noise_bed: float = 0.35  # broadband excitation level relative to the harmonics
    held_out_speakers: int = 2
    mel: MelConfig = field(default_factory=MelConfig)


@dataclass(frozen=True)
class ToySpeaker:
    id: int
    f0: float
    formant_signature: np.ndarray  # (n_mels,), unit norm
    articulation_offset: np.ndarray  # (d_vis,), unit norm


@dataclass
class ToyUtterance:
    id: str
    speaker_id: int
    content: list
    visual_seq: np.ndarray  # (L x d_vis)
    mel: np.ndarray  # (n_mels x 4L), normalized
    waveform: np.ndarray  # (640 L,)


@dataclass
class UtteranceRecord:
    id: str
    speaker_id: int
    content: list
    mel_path: str
    visual_path: str
    wav_path: str

    @property
    def split(self) -> str:
        return self.id.split("-", 1)[0]


@dataclass
class CorpusManifest:
    version: int
    master_seed: int
    config: CorpusConfig
    speakers: list
    records: list
    norm_lo: float
    norm_hi: float
    root: Path

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    @property
    def mel_config(self) -> MelConfig:
        """The corpus MelConfig with the recorded normalization bounds."""
        return replace(self.config.mel, norm_lo=self.norm_lo, norm_hi=self.norm_hi)


def derive_seed(master_seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _smooth_unit_curve(rng: np.random.Generator, n: int, components: int = 4) -> np.ndarray:
    idx = (np.arange(n) + 0.5) / n
    curve = np.zeros(n)
    for j in range(1, components + 1):
        amp = rng.normal()
        phase = rng.uniform(0, 2 * np.pi)
        curve += amp * np.cos(np.pi * j * idx + phase)
    return curve / np.linalg.norm(curve)


def make_speaker(seed: int, cfg: CorpusConfig = CorpusConfig()) -> ToySpeaker:
    """Deterministically build one speaker from a seed (id filled in later)."""
    rng = np.random.default_rng(seed)
    f0 = float(rng.uniform(cfg.f0_min, cfg.f0_max))
    signature = _smooth_unit_curve(rng, cfg.mel.n_mels)
    offset = rng.normal(size=cfg.d_vis)
    offset /= np.linalg.norm(offset)
    return ToySpeaker(id=-1, f0=f0, formant_signature=signature, articulation_offset=offset)


def make_speakers(master_seed: int, cfg: CorpusConfig = CorpusConfig()) -> list:
    """Speaker table with a minimum pairwise f0 gap, enforced by retry."""
    speakers = []
    for i in range(cfg.n_speakers):
        attempt = 0
        while True:
            cand = make_speaker(derive_seed(master_seed, f"speaker{i}a{attempt}"), cfg)
            if all(abs(cand.f0 - s.f0) >= cfg.f0_min_gap for s in speakers):
                break
            attempt += 1
            if attempt > 1000:
                raise ValidationError("cannot place speakers with the required f0 gap")
        speakers.append(ToySpeaker(i, cand.f0, cand.formant_signature, cand.articulation_offset))
    return speakers


def token_embeddings(master_seed: int, cfg: CorpusConfig = CorpusConfig()) -> np.ndarray:
    """Fixed random unit-norm token vectors, (vocab_size x d_vis)."""
    rng = np.random.default_rng(derive_seed(master_seed, "token-embeddings"))
    emb = rng.normal(size=(cfg.vocab_size, cfg.d_vis))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def token_formants(master_seed: int, cfg: CorpusConfig = CorpusConfig()) -> np.ndarray:
    """Per-token formant (center, width) pairs in Hz, (vocab_size x 2 x 2)."""
    rng = np.random.default_rng(derive_seed(master_seed, "token-formants"))
    centers = rng.uniform(400.0, 5500.0, size=(cfg.vocab_size, 2))
    widths = rng.uniform(250.0, 700.0, size=(cfg.vocab_size, 2))
    return np.stack([centers, widths], axis=-1)


def _band_position(freq_hz: np.ndarray) -> np.ndarray:
    # Continuous mel-band coordinate in [0, 79] for 0..8 kHz.
    return np.clip(hz_to_mel(freq_hz) / hz_to_mel(8000.0), 0.0, 1.0) * 79.0


def synth_utterance(
    spk: ToySpeaker,
    content,
    seed: int,
    master_seed: int = 0,
    cfg: CorpusConfig = CorpusConfig(),
    utt_id: str = "",
    mel_cfg: MelConfig | None = None,
) -> ToyUtterance:
    """Render one utterance.

    ``seed`` drives the per-utterance randomness (phases, visual noise);
    ``master_seed`` selects the corpus-level token embedding/formant
    tables. ``mel_cfg`` overrides the normalization bounds when the
    corpus-level ones are already known.
    """
    content = list(content)
    if len(content) < 8:
        raise ValidationError("content must have at least 8 tokens")
    if any(t < 0 or t >= cfg.vocab_size for t in content):
        raise ValidationError("content contains unknown tokens")
    waveform = _synth_waveform(spk, content, seed, master_seed, cfg)
    visual = _synth_visual(spk, content, seed, master_seed, cfg)
    mel = normalize_log_mel(compute_log_mel(waveform, cfg.mel), mel_cfg or cfg.mel)
    return ToyUtterance(
        id=utt_id,
        speaker_id=spk.id,
        content=content,
        visual_seq=visual,
        mel=mel,
        waveform=waveform,
    )


def _synth_waveform(spk, content, seed, master_seed, cfg) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "audio"))
    seg = cfg.mel.stack_factor * cfg.mel.hop  # samples per token (40 ms)
    n = len(content) * seg
    t = np.arange(n) / 16000.0

    hfreqs = np.arange(1, int(7800.0 / spk.f0) + 1) * spk.f0
    # Dense low-level partial grid so every mel band carries the speaker
    # envelope, not just the bands a harmonic happens to land in.
    grid = np.arange(50.0, 7800.0, 20.0)
    partials_per_band = 1.0 / np.gradient(_band_position(grid), grid) / 20.0
    freqs = np.concatenate([hfreqs, grid])
    env = np.exp(
        cfg.speaker_gain
        * np.interp(_band_position(freqs), np.arange(cfg.mel.n_mels), spk.formant_signature)
    )
    base = np.concatenate([np.ones(len(hfreqs)), cfg.noise_bed / partials_per_band]) * env

    formants = token_formants(master_seed, cfg)
    tok_env = np.ones((cfg.vocab_size, len(freqs)))
    for tok in range(cfg.vocab_size):
        bumps = np.zeros(len(freqs))
        for center, width in formants[tok]:
            bumps += np.exp(-0.5 * ((freqs - center) / width) ** 2)
        tok_env[tok] = np.exp(cfg.token_gain * bumps)

    phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
    amp = base[None, :] * tok_env  # (vocab x partials)
    token_per_sample = np.asarray(content)[np.repeat(np.arange(len(content)), seg)]
    wave = np.zeros(n)
    for h in range(len(freqs)):
        wave += amp[token_per_sample, h] * np.sin(2 * np.pi * freqs[h] * t + phases[h])
    wave *= 0.1 / max(np.sqrt(np.mean(wave**2)), 1e-12)
    return wave.astype(np.float32)


def _synth_visual(spk, content, seed, master_seed, cfg) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "visual"))
    emb = token_embeddings(master_seed, cfg)
    frames = emb[np.asarray(content)] + cfg.offset_scale * spk.articulation_offset
    frames = frames + rng.normal(scale=cfg.visual_noise, size=frames.shape)
    return frames.astype(np.float32)


def _split_plan(cfg: CorpusConfig):
    """Yield (speaker_index, utt_index, split) for the whole corpus.

    The last ``held_out_speakers`` speakers go entirely to test; for the
    seen speakers the last two utterances go to test, the two before
    those to val, the rest to train (scaled down for tiny corpora).
    """
    n_eval = 2 if cfg.utts_per_speaker >= 8 else 1
    seen = cfg.n_speakers - cfg.held_out_speakers
    for s in range(cfg.n_speakers):
        for u in range(cfg.utts_per_speaker):
            if s >= seen:
                split = "test"
            elif u >= cfg.utts_per_speaker - n_eval:
                split = "test"
            elif u >= cfg.utts_per_speaker - 2 * n_eval:
                split = "val"
            else:
                split = "train"
            yield s, u, split


def generate_dataset(
    n_speakers: int,
    utts_per_speaker: int,
    master_seed: int,
    out_dir,
    cfg: CorpusConfig | None = None,
) -> CorpusManifest:
    """Render the corpus into ``out_dir`` and write its manifest.

    Deterministic given ``master_seed``: two runs produce byte-identical
    trees. Mel normalization bounds are the corpus-level log-mel min/max
    and are recorded in the manifest header.
    """
    cfg = replace(
        cfg or CorpusConfig(), n_speakers=n_speakers, utts_per_speaker=utts_per_speaker
    )
    if cfg.n_speakers <= cfg.held_out_speakers:
        raise ValidationError("need more speakers than the held-out count")
    out_dir = Path(out_dir)
    try:
        (out_dir / "arrays").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create {out_dir}: {exc}") from exc

    speakers = make_speakers(master_seed, cfg)
    utts = []
    for s, u, split in _split_plan(cfg):
        utt_id = f"{split}-s{s:02d}-u{u:03d}"
        seed = derive_seed(master_seed, utt_id)
        rng = np.random.default_rng(derive_seed(seed, "content"))
        content = rng.integers(0, cfg.vocab_size, size=cfg.content_len).tolist()
        waveform = _synth_waveform(speakers[s], content, seed, master_seed, cfg)
        visual = _synth_visual(speakers[s], content, seed, master_seed, cfg)
        log_mel = compute_log_mel(waveform, cfg.mel)
        utts.append((utt_id, s, content, waveform, visual, log_mel))

    norm_lo = float(min(lm.min() for (_, _, _, _, _, lm) in utts))
    norm_hi = float(max(lm.max() for (_, _, _, _, _, lm) in utts))
    if not norm_lo < norm_hi:
        raise ValidationError("degenerate corpus: flat log-mel range")
    bounded = replace(cfg.mel, norm_lo=norm_lo, norm_hi=norm_hi)

    records = []
    for utt_id, s, content, waveform, visual, log_mel in utts:
        mel_path = f"arrays/{utt_id}.mel.f32m"
        vis_path = f"arrays/{utt_id}.vis.f32m"
        wav_path = f"arrays/{utt_id}.wav.f32m"
        write_f32m(out_dir / mel_path, normalize_log_mel(log_mel, bounded))
        write_f32m(out_dir / vis_path, visual)
        write_f32m(out_dir / wav_path, waveform[None, :])
        records.append(UtteranceRecord(utt_id, s, content, mel_path, vis_path, wav_path))

    manifest = CorpusManifest(
        version=MANIFEST_VERSION,
        master_seed=master_seed,
        config=cfg,
        speakers=speakers,
        records=records,
        norm_lo=norm_lo,
        norm_hi=norm_hi,
        root=out_dir,
    )
    _write_manifest(manifest)
    return manifest


def _write_manifest(man: CorpusManifest) -> None:
    cfg = man.config
    lines = [
        f"#version {man.version}",
        f"#master_seed {man.master_seed}",
        f"#n_speakers {cfg.n_speakers}",
        f"#utts_per_speaker {cfg.utts_per_speaker}",
        f"#content_len {cfg.content_len}",
        f"#vocab_size {cfg.vocab_size}",
        f"#d_vis {cfg.d_vis}",
        f"#visual_noise {cfg.visual_noise!r}",
        f"#offset_scale {cfg.offset_scale!r}",
        f"#speaker_gain {cfg.speaker_gain!r}",
        f"#token_gain {cfg.token_gain!r}",
        f"#noise_bed {cfg.noise_bed!r}",
        f"#held_out_speakers {cfg.held_out_speakers}",
        f"#norm_lo {man.norm_lo!r}",
        f"#norm_hi {man.norm_hi!r}",
    ]
    lines += [f"#speaker {s.id} {s.f0!r}" for s in man.speakers]
    for r in man.records:
        tokens = ",".join(str(t) for t in r.content)
        lines.append(
            "\t".join([r.id, str(r.speaker_id), tokens, r.mel_path, r.visual_path, r.wav_path])
        )
    try:
        (man.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write manifest: {exc}") from exc


def load_manifest(root) -> CorpusManifest:
    """Read a manifest back; speaker vectors are regenerated from the seed."""
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise PersistenceError(f"no manifest at {path}")
    header = {}
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            header.setdefault(key, []).append(value)
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise PersistenceError(f"malformed manifest record: {line!r}")
        utt_id, spk, tokens, mel_path, vis_path, wav_path = fields
        records.append(
            UtteranceRecord(
                utt_id,
                int(spk),
                [int(t) for t in tokens.split(",")],
                mel_path,
                vis_path,
                wav_path,
            )
        )

    def one(key, cast):
        return cast(header[key][0])

    cfg = CorpusConfig(
        n_speakers=one("n_speakers", int),
        utts_per_speaker=one("utts_per_speaker", int),
        content_len=one("content_len", int),
        vocab_size=one("vocab_size", int),
        d_vis=one("d_vis", int),
        visual_noise=one("visual_noise", float),
        offset_scale=one("offset_scale", float),
        speaker_gain=one("speaker_gain", float),
        token_gain=one("token_gain", float),
        noise_bed=one("noise_bed", float),
        held_out_speakers=one("held_out_speakers", int),
    )
    master_seed = one("master_seed", int)
    speakers = make_speakers(master_seed, cfg)
    for s, f0 in zip(speakers, header.get("speaker", [])):
        recorded = float(f0.split()[1])
        if abs(s.f0 - recorded) > 1e-9:
            raise PersistenceError("manifest speaker table disagrees with regeneration")
    for r in records:
        for rel in (r.mel_path, r.visual_path, r.wav_path):
            if not (root / rel).exists():
                raise PersistenceError(f"manifest references missing file {rel}")
    return CorpusManifest(
        version=one("version", int),
        master_seed=master_seed,
        config=cfg,
        speakers=speakers,
        records=records,
        norm_lo=one("norm_lo", float),
        norm_hi=one("norm_hi", float),
        root=root,
    )
