"""Dataclass configs and the flat key=value config-file format.

Every training or decoding run resolves its configuration from defaults,
then an optional config file, then CLI flag overrides, and writes the
resolved snapshot next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Desk-scale defaults keep both architectures trainable on CPU; the
    block counts are chosen so the baseline and decoupled models have
    parameter counts within 15% of each other at these widths.
    """

    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    n_enc_baseline: int = 4
    n_dec: int = 2
    n_acoustic_enc: int = 2
    n_phoneme_enc: int = 1
    dropout: float = 0.1
    label_smoothing: float = 0.1
    ctc_beam: int = 8
    n_candidates: int = 4
    target_vocab: int = 0   # filled in from the corpus vocabulary
    phoneme_vocab: int = 0  # non-blank phonemes; CTC adds the blank class
    d_feat: int = 16

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not self.n_candidates <= self.ctc_beam:
            raise ValueError(f"n_candidates {self.n_candidates} exceeds ctc_beam {self.ctc_beam}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("dropout and label_smoothing must be in [0, 1)")
        for name in ("n_enc_baseline", "n_dec", "n_acoustic_enc", "n_phoneme_enc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def paper_preset(cls, target_vocab: int = 0, phoneme_vocab: int = 0) -> "ModelConfig":
        """Full-scale settings (512/8/2048, 12+6 vs 8+4+6 blocks, CTC beam 20).

        Kept as a named preset only; far too large to train in this repo.
        """
        return cls(d_model=512, heads=8, ffn_dim=2048, n_enc_baseline=12, n_dec=6,
                   n_acoustic_enc=8, n_phoneme_enc=4, ctc_beam=20, n_candidates=10,
                   target_vocab=target_vocab, phoneme_vocab=phoneme_vocab, d_feat=40)


@dataclass
class Hyperparams:
    """Optimization, augmentation, and batching settings."""

    warmup_steps: int = 400
    peak_scale: float = 1.0
    batch_size: int = 16
    a2p_epochs: int = 10
    p2t_epochs: int = 8
    joint_epochs: int = 8
    n_time_masks: int = 2
    max_time_width: int = 4
    n_freq_masks: int = 1
    max_freq_width: int = 2
    avg_last_k: int = 5
    grad_clip: float = 5.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0 and f.name not in ("n_time_masks", "n_freq_masks"):
                raise ValueError(f"{f.name} must be positive")
        if self.n_time_masks < 0 or self.n_freq_masks < 0:
            raise ValueError("mask counts must be >= 0")


@dataclass
class CorpusConfig:
    """Synthetic bilingual corpus settings.

    Language alpha has single-character units mapping to 1-2 phonemes;
    language beta has whole words decomposed into marked word pieces, with
    phoneme strings terminated by the word-boundary token.
    """

    n_alpha_chars: int = 40
    n_alpha_phonemes: int = 24
    n_beta_words: int = 30
    n_beta_pieces: int = 50
    n_beta_phonemes: int = 16
    d_feat: int = 16
    noise_sigma: float = 0.1
    min_duration: int = 2
    max_duration: int = 4
    min_len: int = 3
    max_len: int = 8
    train_cs: int = 2000
    train_alpha: int = 3000
    train_beta: int = 3000
    dev: int = 200
    test: int = 200
    text: int = 2000

    def __post_init__(self):
        if self.min_duration < 2:
            raise ValueError("min_duration must be >= 2 to guarantee CTC feasibility")
        if self.max_duration < self.min_duration:
            raise ValueError("max_duration must be >= min_duration")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ValueError("sentence length range invalid")


_SECTIONS = {"model": ModelConfig, "train": Hyperparams, "corpus": CorpusConfig}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"config line {lineno}: empty key or value")
        out[key] = value
    return out


def _convert(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    return typ(raw)


def load_configs(path: str | Path | None,
                 overrides: dict[str, object] | None = None
                 ) -> tuple[ModelConfig, Hyperparams, CorpusConfig]:
    """Resolve (ModelConfig, Hyperparams, CorpusConfig) from an optional
    config file plus overrides. Unknown keys are errors."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))

    fields_by_cls = {cls: {f.name: f for f in dataclasses.fields(cls)}
                     for cls in _SECTIONS.values()}
    kwargs: dict[type, dict] = {cls: {} for cls in _SECTIONS.values()}

    def apply(name: str, raw):
        matched = False
        for cls, fields in fields_by_cls.items():
            if name in fields and (name != "d_feat" or cls in (ModelConfig, CorpusConfig)):
                typ = fields[name].type
                pytyp = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, None)
                if pytyp is None:
                    pytyp = type(getattr(cls(), name))
                kwargs[cls][name] = _convert(raw, pytyp) if isinstance(raw, str) else raw
                matched = True
        if not matched:
            raise ValueError(f"unknown config key: {name}")

    for name, raw in values.items():
        apply(name, raw)
    for name, raw in (overrides or {}).items():
        if raw is not None:
            apply(name, raw)

    return (ModelConfig(**kwargs[ModelConfig]), Hyperparams(**kwargs[Hyperparams]),
            CorpusConfig(**kwargs[CorpusConfig]))


def format_configs(mcfg: ModelConfig, hp: Hyperparams, ccfg: CorpusConfig,
                   extra: dict | None = None) -> str:
    """Snapshot text in the same flat format load_configs accepts."""
    lines = ["# resolved configuration"]
    seen = set()
    for section, obj in (("model", mcfg), ("training", hp), ("corpus", ccfg)):
        lines.append(f"# {section}")
        for f in dataclasses.fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    for key, val in (extra or {}).items():
        lines.append(f"# {key} = {val}")
    return "\n".join(lines) + "\n"


def config_digest_text(mcfg: ModelConfig) -> str:
    """Canonical text of the architecture config used in checkpoint digests."""
    parts = [f"{f.name}={getattr(mcfg, f.name)}" for f in dataclasses.fields(mcfg)]
    return ";".join(parts)
