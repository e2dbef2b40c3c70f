"""Run configuration: defaults, presets and ``key=value`` files."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import CorpusParams
from .models import ModelConfig
from .objectives import TrainingSchedule


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    p_repeat: float = 0.4
    p_substitute: float = 0.3
    p_drop: float = 0.2
    n_refs: int = 5
    min_count: int = 3
    # model
    embed_dim: int = 64
    hidden_dim: int = 64
    attn_dim: int = 32
    k: int = 8
    d_v: int = 64
    dc_embed_dim: int = 64
    dc_enc_dim: int = 32
    dc_hidden_dim: int = 64
    dc_attn_dim: int = 32
    use_visual: bool = True
    use_context_gate: bool = True
    hard_scma: bool = True
    fuse_dcnet: bool = True
    # optimisation (EditNet)
    lr: float = 5e-4
    batch_size: int = 80
    lr_decay: float = 0.8
    lr_decay_every: int = 3
    ss_increment: float = 0.05
    ss_every: int = 5
    ss_max: float = 1.0
    xe_epochs: int = 15
    editnet_mse_epochs: int = 0
    scst_epochs: int = 25
    scst_lr: float = 5e-5
    scst_anneal: float = 0.5
    # DCNet
    dc_batch_size: int = 60
    dc_xe_epochs: int = 4
    dc_mse_epochs: int = 1
    # misc
    max_iters: int = 0          # 0 = no cap on optimiser steps per phase
    max_len: int = 16
    log_every: int = 1
    dev_every: int = 1          # epochs between dev evaluations (0 = never)

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(vocab_size=vocab_size,
                           **{k: v for k, v in asdict(self).items() if k in names and k != "vocab_size"})

    def corpus_params(self) -> CorpusParams:
        return CorpusParams(self.p_repeat, self.p_substitute, self.p_drop, self.n_refs)

    def schedule(self, lr: float | None = None) -> TrainingSchedule:
        return TrainingSchedule(base_lr=self.lr if lr is None else lr, decay=self.lr_decay,
                                decay_every=self.lr_decay_every, ss_increment=self.ss_increment,
                                ss_every=self.ss_every, ss_max=self.ss_max,
                                scst_lr=self.scst_lr, scst_anneal=self.scst_anneal)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


PRESETS: dict[str, dict] = {
    # full-size dimensions; constructible but not meant for CPU training
    "paper-dims": dict(embed_dim=1024, hidden_dim=1024, attn_dim=512, k=36, d_v=2048,
                       dc_embed_dim=1024, dc_enc_dim=512, dc_hidden_dim=1024, dc_attn_dim=512),
    # small batches and a fast rate: copying is learned from the number of updates
    "desk": dict(batch_size=20, dc_batch_size=20, lr=3e-3, lr_decay_every=8, xe_epochs=40,
                 dc_xe_epochs=15, dc_mse_epochs=1, scst_epochs=5, ss_every=10, dev_every=5),
    # one batch per epoch, so the learning rate is held constant
    "overfit": dict(train_size=16, dev_size=16, test_size=16, batch_size=16, dc_batch_size=16,
                    min_count=1, hidden_dim=64, lr=5e-3, lr_decay=1.0, xe_epochs=300, dc_xe_epochs=0,
                    dc_mse_epochs=0, scst_epochs=0, max_iters=300, fuse_dcnet=False, ss_increment=0.0,
                    dev_every=50),
}


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def parse_overrides(text: str) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown setting {key!r}")
        out[key] = _parse_value(value, types[key])
    return out


def load_config(path: str | Path | None = None, preset: str | None = None, **overrides) -> RunConfig:
    """Defaults, then the preset, then the file, then explicit overrides."""
    cfg = RunConfig()
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = replace(cfg, **PRESETS[preset])
    if path:
        cfg = replace(cfg, **parse_overrides(Path(path).read_text()))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides)
