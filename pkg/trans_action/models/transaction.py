"""
Cascaded TSA -> CMA -> SA blocks with verb/noun heads per block and a final
action TSA head.

Wiring of one block (per sample, N frames):

    rgb, flow, obj streams ──TSA per modality──┐      (shared by both branches in block 1)
        verb branch: concat channels -> CMA_verb ┐
        noun branch: concat channels -> CMA_noun ┴ concat time (2N rows) -> SA -> split at row N
    verb_feat / noun_feat -> mean over time -> verb / noun head
    next block: each branch feature re-split into (d_rgb, d_flow, d_obj) segments

After the last block verb_feat and noun_feat are concatenated along channels,
passed through the final TSA, mean-pooled and mapped to action logits.
The positional embedding is added once, at block 1's TSA inputs.
"""

from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from trans_action.exceptions import ShapeError
from trans_action.models.attention import (
    EncoderLayerParams,
    NamedTensors,
    encoder_layer,
    init_encoder_layer,
    uniform_init,
)
from trans_action.models.tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mean_over_axis,
    reshape,
    split,
)

MODALITIES = ("rgb", "flow", "obj")
VARIANTS = ("full", "tsa_only_rgb", "tsa_only_flow", "tsa_only_obj", "no_cma", "no_sa")
Variant = Literal["full", "tsa_only_rgb", "tsa_only_flow", "tsa_only_obj", "no_cma", "no_sa"]


class ModelConfig(BaseModel):
    """Shape of the model. `d_ff = 0` means each layer uses twice its input width."""

    d_rgb: int = Field(default=32, ge=1)
    d_flow: int = Field(default=32, ge=1)
    d_obj: int = Field(default=32, ge=1)
    n_frames: int = Field(default=8, ge=1)
    n_blocks: int = Field(default=2, ge=1)
    heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=0, ge=0)
    n_verbs: int = Field(default=12, ge=1)
    n_nouns: int = Field(default=24, ge=1)
    n_actions: int = Field(default=48, ge=1)
    variant: Variant = "full"

    @property
    def modalities(self) -> Tuple[str, ...]:
        if self.variant.startswith("tsa_only_"):
            return (self.variant[len("tsa_only_"):],)
        return MODALITIES

    @property
    def modality_dims(self) -> Dict[str, int]:
        return {m: getattr(self, f"d_{m}") for m in self.modalities}

    @property
    def d_sum(self) -> int:
        return sum(self.modality_dims.values())

    @property
    def use_cma(self) -> bool:
        return self.variant in ("full", "no_sa")

    @property
    def use_sa(self) -> bool:
        return self.variant in ("full", "no_cma")

    def layer_d_ff(self, d_in: int) -> int:
        return self.d_ff or 2 * d_in

    @model_validator(mode="after")
    def _check_widths(self):
        for name in MODALITIES:
            width = getattr(self, f"d_{name}")
            if width % 2:
                raise ValueError(f"d_{name}={width} must be even for the sinusoidal embedding")
            if width % self.heads:
                raise ValueError(f"d_{name}={width} is not divisible by heads={self.heads}")
        return self


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def epic_config(**overrides) -> ModelConfig:
    """Feature widths and vocabularies of the precomputed EPIC-Kitchens-100 features (0.25 s steps)."""
    values = dict(d_rgb=1024, d_flow=1024, d_obj=352, n_frames=11, n_verbs=97, n_nouns=300, n_actions=3806)
    values.update(overrides)
    return ModelConfig(**values)


@dataclass
class AffineParams:
    weight: Tensor
    bias: Tensor

    def named_parameters(self, prefix: str) -> NamedTensors:
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass
class BlockParams:
    tsa_verb: Dict[str, EncoderLayerParams]
    # None: the verb branch's TSA layers serve both branches
    tsa_noun: Optional[Dict[str, EncoderLayerParams]]
    cma_verb: Optional[EncoderLayerParams]
    cma_noun: Optional[EncoderLayerParams]
    sa: Optional[EncoderLayerParams]
    verb_head: AffineParams
    noun_head: AffineParams

    def named_parameters(self, prefix: str) -> NamedTensors:
        named = []
        if self.tsa_noun is None:
            for m, layer in self.tsa_verb.items():
                named += layer.named_parameters(f"{prefix}.tsa.{m}")
        else:
            for m, layer in self.tsa_verb.items():
                named += layer.named_parameters(f"{prefix}.tsa_verb.{m}")
            for m, layer in self.tsa_noun.items():
                named += layer.named_parameters(f"{prefix}.tsa_noun.{m}")
        for name in ("cma_verb", "cma_noun", "sa"):
            layer = getattr(self, name)
            if layer is not None:
                named += layer.named_parameters(f"{prefix}.{name}")
        return named + self.verb_head.named_parameters(f"{prefix}.verb_head") + \
            self.noun_head.named_parameters(f"{prefix}.noun_head")


@dataclass
class ModelParams:
    blocks: List[BlockParams]
    final_tsa: EncoderLayerParams
    action_head: AffineParams

    def named_parameters(self) -> NamedTensors:
        named = []
        for i, block in enumerate(self.blocks):
            named += block.named_parameters(f"blocks.{i}")
        return named + self.final_tsa.named_parameters("final_tsa") + \
            self.action_head.named_parameters("action_head")

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


@dataclass
class BlockOutput:
    streams_verb: List[Tensor]
    streams_noun: List[Tensor]
    verb_feat: Tensor
    noun_feat: Tensor
    sa_input_shape: Optional[Tuple[int, ...]]


@dataclass
class ForwardOutput:
    per_block_verb_logits: List[Tensor]
    per_block_noun_logits: List[Tensor]
    action_logits: Tensor

    @property
    def verb_logits(self) -> Tensor:
        return self.per_block_verb_logits[-1]

    @property
    def noun_logits(self) -> Tensor:
        return self.per_block_noun_logits[-1]


def _init_affine(rng: np.random.Generator, d_in: int, d_out: int) -> AffineParams:
    return AffineParams(weight=uniform_init(rng, d_in, (d_in, d_out)), bias=uniform_init(rng, d_in, (d_out,)))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded parameter set for `cfg`; the draw order is fixed so equal seeds give equal weights."""
    rng = np.random.default_rng(seed)
    dims = cfg.modality_dims
    d_sum = cfg.d_sum

    def encoder(d_in):
        return init_encoder_layer(rng, d_in, cfg.heads, cfg.layer_d_ff(d_in))

    blocks = []
    for i in range(cfg.n_blocks):
        tsa_verb = {m: encoder(d) for m, d in dims.items()}
        tsa_noun = None if i == 0 else {m: encoder(d) for m, d in dims.items()}
        blocks.append(BlockParams(
            tsa_verb=tsa_verb,
            tsa_noun=tsa_noun,
            cma_verb=encoder(d_sum) if cfg.use_cma else None,
            cma_noun=encoder(d_sum) if cfg.use_cma else None,
            sa=encoder(d_sum) if cfg.use_sa else None,
            verb_head=_init_affine(rng, d_sum, cfg.n_verbs),
            noun_head=_init_affine(rng, d_sum, cfg.n_nouns),
        ))
    return ModelParams(
        blocks=blocks,
        final_tsa=encoder(2 * d_sum),
        action_head=_init_affine(rng, 2 * d_sum, cfg.n_actions),
    )


def ablation_variant(cfg: ModelConfig, which: str, seed: int = 0) -> Tuple[ModelConfig, ModelParams]:
    """Rewire `cfg` as one of the ablation variants and initialise matching parameters."""
    if which not in VARIANTS:
        raise ValueError(f"unknown ablation variant '{which}' (expected one of {', '.join(VARIANTS)})")
    variant_cfg = cfg.model_copy(update={"variant": which})
    return variant_cfg, init_params(variant_cfg, seed)


def _encode(x: Tensor, layer: Optional[EncoderLayerParams], add_pe: bool = False) -> Tensor:
    return x if layer is None else encoder_layer(x, layer, add_pe)


def _fuse(streams: Sequence[Tensor]) -> Tensor:
    return streams[0] if len(streams) == 1 else concat(streams, axis=-1)


def _resplit(feat: Tensor, widths: Sequence[int]) -> List[Tensor]:
    return [feat] if len(widths) == 1 else split(feat, widths, axis=-1)


def block_forward(
    streams_verb: Sequence[Tensor],
    streams_noun: Sequence[Tensor],
    p: BlockParams,
    first_block: bool,
) -> BlockOutput:
    """One cascade block. Passing the same list for both branches shares the TSA work in block 1."""
    modalities = list(p.tsa_verb)
    if len(streams_verb) != len(modalities) or len(streams_noun) != len(modalities):
        raise ShapeError(f"block expects {len(modalities)} streams per branch, got "
                         f"{len(streams_verb)} and {len(streams_noun)}")
    widths = [s.shape[-1] for s in streams_verb]

    tsa_verb = [encoder_layer(s, p.tsa_verb[m], add_pe=first_block) for s, m in zip(streams_verb, modalities)]
    if p.tsa_noun is None and streams_noun is streams_verb:
        tsa_noun = tsa_verb
    else:
        layers = p.tsa_noun if p.tsa_noun is not None else p.tsa_verb
        tsa_noun = [encoder_layer(s, layers[m], add_pe=first_block) for s, m in zip(streams_noun, modalities)]

    verb_feat = _encode(_fuse(tsa_verb), p.cma_verb)
    noun_feat = _encode(_fuse(tsa_noun), p.cma_noun)

    sa_input_shape = None
    if p.sa is not None:
        n = verb_feat.shape[-2]
        joint = concat([verb_feat, noun_feat], axis=-2)
        sa_input_shape = joint.shape
        verb_feat, noun_feat = split(encoder_layer(joint, p.sa), [n, n], axis=-2)

    return BlockOutput(
        streams_verb=_resplit(verb_feat, widths),
        streams_noun=_resplit(noun_feat, widths),
        verb_feat=verb_feat,
        noun_feat=noun_feat,
        sa_input_shape=sa_input_shape,
    )


def _head(feat: Tensor, head: AffineParams) -> Tensor:
    pooled = mean_over_axis(feat, axis=-2)
    return add(matmul(pooled, head.weight), head.bias)


FeatureInput = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _select_streams(features: FeatureInput, cfg: ModelConfig) -> List[Tensor]:
    if isinstance(features, Mapping):
        by_name = features
    else:
        if len(features) != len(MODALITIES):
            raise ShapeError(f"expected {len(MODALITIES)} modality streams (rgb, flow, obj), got {len(features)}")
        by_name = dict(zip(MODALITIES, features))

    streams = []
    for m, width in cfg.modality_dims.items():
        if m not in by_name:
            raise ShapeError(f"missing '{m}' features")
        x = by_name[m]
        if x.ndim not in (2, 3) or x.shape[-1] != width:
            raise ShapeError(f"'{m}' features have shape {x.shape}, expected [..., N, {width}]")
        streams.append(x)
    if len({s.shape[:-1] for s in streams}) != 1:
        raise ShapeError(f"modality streams disagree on frame count: {[s.shape for s in streams]}")
    return streams


def model_forward(features: FeatureInput, params: ModelParams, cfg: ModelConfig) -> ForwardOutput:
    """
    Run the cascade on one sample (`[N, d_m]` streams) or a batch (`[B, N, d_m]`).

    Logits are `[C]` for a single sample and `[B, C]` for a batch.
    """
    if len(params.blocks) != cfg.n_blocks:
        raise ShapeError(f"config asks for {cfg.n_blocks} blocks, parameters hold {len(params.blocks)}")
    streams = _select_streams(features, cfg)
    single = streams[0].ndim == 2
    if single:
        streams = [reshape(s, (1,) + s.shape) for s in streams]

    verb_logits, noun_logits = [], []
    streams_verb = streams_noun = streams
    out = None
    for i, block in enumerate(params.blocks):
        out = block_forward(streams_verb, streams_noun, block, first_block=(i == 0))
        verb_logits.append(_head(out.verb_feat, block.verb_head))
        noun_logits.append(_head(out.noun_feat, block.noun_head))
        streams_verb, streams_noun = out.streams_verb, out.streams_noun

    fused = encoder_layer(concat([out.verb_feat, out.noun_feat], axis=-1), params.final_tsa)
    action_logits = _head(fused, params.action_head)

    if single:
        def squeeze(t):
            return reshape(t, t.shape[1:])
        verb_logits = [squeeze(t) for t in verb_logits]
        noun_logits = [squeeze(t) for t in noun_logits]
        action_logits = squeeze(action_logits)

    return ForwardOutput(verb_logits, noun_logits, action_logits)
