"""Seeded synthetic stand-in for precomputed multimodal anticipation features."""

from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from trans_action.logger import logger
from trans_action.services.dataset import ModalitySample, write_dataset


class SyntheticConfig(BaseModel):
    seed: int = 0
    n_samples: int = Field(default=64, ge=1)
    n_frames: int = Field(default=8, ge=1)
    d_rgb: int = Field(default=32, ge=1)
    d_flow: int = Field(default=32, ge=1)
    d_obj: int = Field(default=32, ge=1)
    n_verbs: int = Field(default=12, ge=1)
    n_nouns: int = Field(default=24, ge=1)
    n_actions: int = Field(default=48, ge=1)
    zipf_exponent: float = Field(default=1.0, ge=0.0)
    n_participants: int = Field(default=8, ge=1)
    unseen_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    signal_frame: int = Field(default=1, ge=0)
    signal_strength: float = 3.0
    class_mean_strength: float = 0.5
    noise: float = Field(default=1.0, ge=0.0)

    @property
    def n_unseen(self) -> int:
        return int(round(self.unseen_fraction * self.n_participants))

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.n_actions > self.n_verbs * self.n_nouns:
            raise ValueError(f"n_actions={self.n_actions} exceeds the {self.n_verbs * self.n_nouns} "
                             f"possible (verb, noun) pairs")
        if self.signal_frame >= self.n_frames:
            raise ValueError(f"signal_frame={self.signal_frame} is outside {self.n_frames} frames")
        if self.n_unseen >= self.n_participants:
            raise ValueError("unseen_fraction leaves no participant for the train split")
        return self


def action_table(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """`[n_actions, 2]` distinct (verb, noun) pairs, covering every verb and noun when there are enough actions."""
    cover = max(cfg.n_verbs, cfg.n_nouns)
    pairs = []
    for a in range(cover):
        pair = (a % cfg.n_verbs, a % cfg.n_nouns)
        if pair not in pairs:
            pairs.append(pair)
    taken = set(pairs)
    remaining = [(v, n) for v in range(cfg.n_verbs) for n in range(cfg.n_nouns) if (v, n) not in taken]
    for index in rng.permutation(len(remaining)):
        if len(pairs) >= cfg.n_actions:
            break
        pairs.append(remaining[index])
    return np.array(pairs[:cfg.n_actions], dtype=np.int64)


def zipf_probabilities(n_classes: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, n_classes + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def synthesize(cfg: SyntheticConfig) -> List[ModalitySample]:
    """
    Draw a dataset that is a pure function of `cfg`.

    Actions follow a Zipf-like law. Each stream is Gaussian noise around a
    weak class mean, plus a strong class signature planted at
    `signal_frame`: rgb carries verb and noun prototypes, flow the verb
    prototype, obj the noun prototype. The last `n_unseen` participants
    appear only in val/test.
    """
    rng = np.random.default_rng(cfg.seed)
    pairs = action_table(cfg, rng)
    widths = {"rgb": cfg.d_rgb, "flow": cfg.d_flow, "obj": cfg.d_obj}
    verb_protos = {m: rng.standard_normal((cfg.n_verbs, d)) for m, d in widths.items()}
    noun_protos = {m: rng.standard_normal((cfg.n_nouns, d)) for m, d in widths.items()}
    carries = {"rgb": (1.0, 1.0), "flow": (1.0, 0.0), "obj": (0.0, 1.0)}

    actions = rng.choice(len(pairs), size=cfg.n_samples, p=zipf_probabilities(len(pairs), cfg.zipf_exponent))
    participants = rng.integers(0, cfg.n_participants, size=cfg.n_samples)
    split_draws = rng.random(cfg.n_samples)
    first_unseen = cfg.n_participants - cfg.n_unseen

    samples = []
    for i in range(cfg.n_samples):
        action = int(actions[i])
        verb, noun = (int(x) for x in pairs[action])
        if participants[i] >= first_unseen:
            split = "val" if split_draws[i] < 0.5 else "test"
        elif split_draws[i] < cfg.val_fraction:
            split = "val"
        else:
            split = "train"

        streams = {}
        for m, width in widths.items():
            w_verb, w_noun = carries[m]
            prototype = w_verb * verb_protos[m][verb] + w_noun * noun_protos[m][noun]
            x = cfg.noise * rng.standard_normal((cfg.n_frames, width)) + cfg.class_mean_strength * prototype
            x[cfg.signal_frame] += cfg.signal_strength * prototype
            streams[m] = x.astype(np.float32)

        samples.append(ModalitySample(
            sample_id=f"s{i:05d}",
            participant_id=f"P{int(participants[i]):02d}",
            verb=verb,
            noun=noun,
            action=action,
            split=split,
            **streams,
        ))
    return samples


def generate_synthetic(cfg: SyntheticConfig, output_dir) -> Tuple[Path, Path]:
    output_dir = Path(output_dir)
    samples = synthesize(cfg)
    paths = write_dataset(output_dir / "features.tact", output_dir / "annotations.csv", samples)
    counts = {split: sum(s.split == split for s in samples) for split in ("train", "val", "test")}
    logger.info(f"Generated synthetic dataset (seed={cfg.seed}, zipf={cfg.zipf_exponent}): {counts}")
    return paths
