"""The combined descriptor-learning / metric-learning network family.

Every network in the family runs two 8-block convolutional stacks per
spectrum — one feeding the match/no-match classifier (the metric side), one
feeding the descriptor head — and varies along three axes:

* ``metric_structure`` / ``descriptor_structure``: whether a stack's two
  spectrum branches share weights (``siamese``) or keep separate weights
  per spectrum (``pseudo``);
* ``sharing``: which block positions the metric and descriptor stacks share
  with each other within a spectrum — ``none``, ``front`` (first
  ``shared_layer_count`` blocks), ``back`` (last ``shared_layer_count``
  blocks), or ``full``;
* ``dominant``: on positions shared between the two stacks the siamese/
  pseudo choice can conflict; the dominant network's choice wins there
  (``metric`` wins when unmarked).

Twenty named presets (A1–A4, B1–B4, C1–C6, D1–D6) enumerate the family;
``C3`` — pseudo metric stack, siamese descriptor stack, front-4 sharing,
metric dominant — is the default used everywhere else in the package.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn

from .blocks import ConvBlock, DescriptorHead, EfficientChannelAttention, MetricClassifier
from .errors import ConfigError, NumericDomainError, ShapeError

PATCH_SIZE = 64
BACKBONE_CHANNELS = (32, 32, 64, 64, 128, 128, 128, 128)
BACKBONE_STRIDES = (1, 1, 2, 1, 2, 1, 2, 1)
ATTENTION_POSITIONS = (4, 8)
FEATURE_MAP_SIZE = 8
N_BLOCKS = 8

SIAMESE = "siamese"
PSEUDO = "pseudo"
STRUCTURES = (SIAMESE, PSEUDO)
SHARINGS = ("none", "front", "back", "full")
DOMINANTS = ("none", "metric", "descriptor")
DESCRIPTOR_DIMS = (64, 128, 256)
SPECTRA = ("a", "b")


@dataclass(frozen=True)
class ArchitectureConfig:
    name: str = "C3"
    metric_structure: str = PSEUDO
    descriptor_structure: str = SIAMESE
    sharing: str = "front"
    shared_layer_count: int = 4
    dominant: str = "metric"
    descriptor_dim: int = 128
    use_eca: bool = True
    channel_scale: float = 1.0

    def __post_init__(self):
        if self.metric_structure not in STRUCTURES:
            raise ConfigError(f"metric_structure must be one of {STRUCTURES}")
        if self.descriptor_structure not in STRUCTURES:
            raise ConfigError(f"descriptor_structure must be one of {STRUCTURES}")
        if self.sharing not in SHARINGS:
            raise ConfigError(f"sharing must be one of {SHARINGS}")
        if self.dominant not in DOMINANTS:
            raise ConfigError(f"dominant must be one of {DOMINANTS}")
        if self.descriptor_dim not in DESCRIPTOR_DIMS:
            raise ConfigError(f"descriptor_dim must be one of {DESCRIPTOR_DIMS}")
        if not 0.0 < self.channel_scale <= 4.0:
            raise ConfigError("channel_scale must be in (0, 4]")
        # normalize the count so reports never depend on a stale value
        if self.sharing == "full":
            object.__setattr__(self, "shared_layer_count", N_BLOCKS)
        elif self.sharing == "none":
            object.__setattr__(self, "shared_layer_count", 0)
        elif not 0 <= self.shared_layer_count <= N_BLOCKS:
            raise ConfigError(f"shared_layer_count must be in [0, {N_BLOCKS}]")

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        data = dict(data)
        preset_name = data.pop("preset", None)
        base = get_preset(preset_name).to_dict() if preset_name else {}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture fields: {', '.join(sorted(unknown))}")
        base.update(data)
        return cls(**base)

    # -- sharing geometry -------------------------------------------------
    def cross_stack_positions(self) -> frozenset:
        """Block positions (1-based) shared between metric and descriptor."""
        k = self.shared_layer_count
        if self.sharing == "full":
            return frozenset(range(1, N_BLOCKS + 1))
        if self.sharing == "front":
            return frozenset(range(1, k + 1))
        if self.sharing == "back":
            return frozenset(range(N_BLOCKS - k + 1, N_BLOCKS + 1))
        return frozenset()

    def shared_segment_structure(self) -> str:
        if self.dominant == "descriptor":
            return self.descriptor_structure
        return self.metric_structure


_STRUCT_COMBOS = {
    1: (SIAMESE, SIAMESE),
    2: (SIAMESE, PSEUDO),
    3: (PSEUDO, SIAMESE),
    4: (PSEUDO, PSEUDO),
}


def _series(prefix: str, sharing: str) -> dict:
    presets = {}
    for i, (m, d) in _STRUCT_COMBOS.items():
        presets[f"{prefix}{i}"] = dict(metric_structure=m, descriptor_structure=d, sharing=sharing)
    if sharing in ("front", "back"):
        # variants 5/6 re-run the mixed combos with the descriptor marked dominant
        presets[f"{prefix}3"]["dominant"] = "metric"
        presets[f"{prefix}5"] = dict(
            metric_structure=SIAMESE, descriptor_structure=PSEUDO,
            sharing=sharing, dominant="descriptor",
        )
        presets[f"{prefix}6"] = dict(
            metric_structure=PSEUDO, descriptor_structure=SIAMESE,
            sharing=sharing, dominant="descriptor",
        )
    return presets


_PRESET_FIELDS: dict = {}
_PRESET_FIELDS.update(_series("A", "none"))
_PRESET_FIELDS.update(_series("B", "full"))
_PRESET_FIELDS.update(_series("C", "front"))
_PRESET_FIELDS.update(_series("D", "back"))

PRESET_NAMES = tuple(sorted(_PRESET_FIELDS, key=lambda n: (n[0], int(n[1:]))))


def get_preset(name: str, **overrides) -> ArchitectureConfig:
    if name not in _PRESET_FIELDS:
        raise ConfigError(f"unknown architecture preset {name!r}; choose from {PRESET_NAMES}")
    fields = dict(_PRESET_FIELDS[name])
    fields.setdefault("dominant", "none")
    fields.setdefault("shared_layer_count", 4)
    fields.update(overrides)
    return ArchitectureConfig(name=name, **fields)


def scaled_channels(scale: float) -> tuple:
    return tuple(max(4, int(round(c * scale))) for c in BACKBONE_CHANNELS)


@dataclass
class ExtractedFeatures:
    """Feature maps and descriptors for one batch of spectrum-A/B patches."""

    metric_a: torch.Tensor  # [N, C, 8, 8]
    metric_b: torch.Tensor
    descriptor_map_a: Optional[torch.Tensor]
    descriptor_map_b: Optional[torch.Tensor]
    descriptor_a: Optional[torch.Tensor]  # [N, D], unit rows
    descriptor_b: Optional[torch.Tensor]


class KglNet(nn.Module):
    """One member of the network family plus its two heads.

    Blocks live in a registry keyed by parameter group; a logical stack
    position (stack, spectrum, block index) resolves to a registry key, and
    positions that must share parameters resolve to the same key — sharing
    is aliasing of module instances, never weight copying.
    """

    def __init__(self, config: ArchitectureConfig, seed: int = 0, include_descriptor: bool = True):
        super().__init__()
        if not include_descriptor and (config.sharing != "none" or config.dominant != "none"):
            config = replace(config, sharing="none", dominant="none")
        self.config = config
        self.include_descriptor = include_descriptor
        channels = scaled_channels(config.channel_scale)
        self.channels = channels

        shared_positions = config.cross_stack_positions()
        shared_structure = config.shared_segment_structure()
        stacks = ("metric", "descriptor") if include_descriptor else ("metric",)

        self.blocks = nn.ModuleDict()
        self.attention = nn.ModuleDict()
        self._stack_keys: dict = {}
        for pos in range(1, N_BLOCKS + 1):
            in_ch = 1 if pos == 1 else channels[pos - 2]
            out_ch = channels[pos - 1]
            for stack in stacks:
                for spectrum in SPECTRA:
                    if pos in shared_positions:
                        structure = shared_structure
                        tag = "x"
                    else:
                        structure = (
                            config.metric_structure if stack == "metric"
                            else config.descriptor_structure
                        )
                        tag = stack[0]
                    key = f"{tag}{pos}" if structure == SIAMESE else f"{tag}{pos}_{spectrum}"
                    self._stack_keys[(stack, spectrum, pos)] = key
                    if key not in self.blocks:
                        self.blocks[key] = ConvBlock(in_ch, out_ch, BACKBONE_STRIDES[pos - 1])
                        if config.use_eca and pos in ATTENTION_POSITIONS:
                            self.attention[key] = EfficientChannelAttention(out_ch)

        self.descriptor_head = (
            DescriptorHead(channels[-1], config.descriptor_dim) if include_descriptor else None
        )
        self.metric_classifier = MetricClassifier(channels[-1] * FEATURE_MAP_SIZE**2)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, mod in sorted(self.named_modules()):
                if isinstance(mod, (nn.Conv2d, nn.Conv1d, nn.Linear)):
                    fan_in = mod.weight.shape[1:].numel()
                    mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                    if mod.bias is not None:
                        mod.bias.zero_()
            # a damped final layer keeps initial match probabilities near
            # chance instead of confidently random
            self.metric_classifier.fc[-1].weight.mul_(0.1)
            self._align_twin_blocks()

    def _align_twin_blocks(self):
        """Give structural twins identical starting weights.

        Unshared spectrum-B towers start as copies of their spectrum-A
        sibling (the usual warm start for pseudo two-stream nets), and
        unshared descriptor blocks start as copies of the metric block at
        the same depth.  Twins stay independent parameters and specialize
        during training; starting them equal just means the guidance term
        begins at zero and steers the stacks apart gradually instead of
        yanking two unrelated random nets together, which at small scale
        reliably crushes both into a constant map.
        """

        def copy_group(dst_key: str, src_key: str):
            if dst_key == src_key:
                return
            pairs = zip(self.blocks[dst_key].parameters(), self.blocks[src_key].parameters())
            for dst, src in pairs:
                dst.copy_(src)
            if dst_key in self.attention:
                for dst, src in zip(
                    self.attention[dst_key].parameters(), self.attention[src_key].parameters()
                ):
                    dst.copy_(src)

        stacks = ("metric", "descriptor") if self.include_descriptor else ("metric",)
        # spectrum towers first so the cross-stack pass below copies from
        # already-aligned sources
        for pos in range(1, N_BLOCKS + 1):
            for stack in stacks:
                copy_group(
                    self._stack_keys[(stack, "b", pos)],
                    self._stack_keys[(stack, "a", pos)],
                )
        for pos in range(1, N_BLOCKS + 1):
            if self.include_descriptor:
                for spectrum in SPECTRA:
                    copy_group(
                        self._stack_keys[("descriptor", spectrum, pos)],
                        self._stack_keys[("metric", spectrum, pos)],
                    )

    # -- structure inspection ---------------------------------------------
    def stack_module(self, stack: str, spectrum: str, position: int) -> ConvBlock:
        return self.blocks[self._stack_keys[(stack, spectrum, position)]]

    def stack_key(self, stack: str, spectrum: str, position: int) -> str:
        return self._stack_keys[(stack, spectrum, position)]

    # -- forward ----------------------------------------------------------
    def _apply_stage(self, stack: str, spectrum: str, pos: int, x: torch.Tensor) -> torch.Tensor:
        key = self._stack_keys[(stack, spectrum, pos)]
        x = self.blocks[key](x)
        if key in self.attention:
            x = self.attention[key](x)
        return x

    def _spectrum_maps(self, x: torch.Tensor, spectrum: str):
        if not self.include_descriptor:
            for pos in range(1, N_BLOCKS + 1):
                x = self._apply_stage("metric", spectrum, pos, x)
            return x, None
        # positions where both stacks resolve to the same module need only
        # one evaluation; walk the common prefix once, then branch
        prefix = 0
        for pos in range(1, N_BLOCKS + 1):
            if (
                self._stack_keys[("metric", spectrum, pos)]
                == self._stack_keys[("descriptor", spectrum, pos)]
            ):
                prefix = pos
            else:
                break
        h = x
        for pos in range(1, prefix + 1):
            h = self._apply_stage("metric", spectrum, pos, h)
        hm, hd = h, h
        for pos in range(prefix + 1, N_BLOCKS + 1):
            hm = self._apply_stage("metric", spectrum, pos, hm)
            hd = self._apply_stage("descriptor", spectrum, pos, hd)
        return hm, hd

    def _as_patch_tensor(self, patches) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        t = torch.as_tensor(patches, dtype=dtype)
        if t.dim() != 4 or t.shape[1] != 1 or t.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(
                f"expected patches [N, 1, {PATCH_SIZE}, {PATCH_SIZE}], got {tuple(t.shape)}"
            )
        return t

    def spectrum_features(self, patches, spectrum: str):
        """Single-spectrum forward: (metric map, descriptor or None).

        Lets callers that score arbitrary pair lists compute each patch's
        features once instead of once per pair.
        """
        if spectrum not in SPECTRA:
            raise ConfigError(f"spectrum must be one of {SPECTRA}, got {spectrum!r}")
        x = self._as_patch_tensor(patches)
        metric_map, desc_map = self._spectrum_maps(x, spectrum)
        descriptor = self.descriptor_head(desc_map) if self.include_descriptor else None
        return metric_map, descriptor

    def extract_features(self, patches_a, patches_b) -> ExtractedFeatures:
        """Run both spectra through both stacks.

        Returns metric feature maps [N, C, 8, 8] for each spectrum and,
        unless this is a metric-only network, descriptor maps plus
        unit-norm descriptors [N, D].
        """
        a = self._as_patch_tensor(patches_a)
        b = self._as_patch_tensor(patches_b)
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"spectrum batches differ in size: {a.shape[0]} vs {b.shape[0]}")
        metric_a, desc_map_a = self._spectrum_maps(a, "a")
        metric_b, desc_map_b = self._spectrum_maps(b, "b")
        if not bool(torch.isfinite(metric_a).all() & torch.isfinite(metric_b).all()):
            raise NumericDomainError("non-finite values in metric feature maps")
        if not self.include_descriptor:
            return ExtractedFeatures(metric_a, metric_b, None, None, None, None)
        desc_a = self.descriptor_head(desc_map_a)
        desc_b = self.descriptor_head(desc_map_b)
        if not bool(torch.isfinite(desc_a).all() & torch.isfinite(desc_b).all()):
            raise NumericDomainError("non-finite values in descriptors")
        return ExtractedFeatures(metric_a, metric_b, desc_map_a, desc_map_b, desc_a, desc_b)

    def forward(self, patches_a, patches_b) -> ExtractedFeatures:
        return self.extract_features(patches_a, patches_b)


def build_network(config: ArchitectureConfig, seed: int = 0) -> KglNet:
    return KglNet(config, seed=seed)


def build_metric_only(config: ArchitectureConfig, seed: int = 0) -> KglNet:
    """The match-classifier-only ablation: no descriptor stack, head, or
    cross-stack sharing."""
    return KglNet(config, seed=seed, include_descriptor=False)


def metric_branch_forward(net: KglNet, feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
    """Match logits [N] from two metric feature maps; symmetric in its
    arguments because only |feat_a - feat_b| enters the classifier."""
    if feat_a.shape != feat_b.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    if feat_a.dim() != 4 or feat_a.flatten(1).shape[1] != net.metric_classifier.in_features:
        raise ShapeError(
            f"feature maps {tuple(feat_a.shape)} do not match classifier input "
            f"size {net.metric_classifier.in_features}"
        )
    return net.metric_classifier.score_maps(feat_a, feat_b)


def descriptor_distance(desc_a: torch.Tensor, desc_b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance per row; in [0, 2] for unit-norm inputs."""
    if desc_a.shape != desc_b.shape:
        raise ShapeError(f"descriptor batches differ in shape: {tuple(desc_a.shape)} vs {tuple(desc_b.shape)}")
    return (desc_a - desc_b).norm(p=2, dim=1)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


@dataclass(frozen=True)
class AliasedGroup:
    key: str
    positions: tuple  # ((stack, spectrum, block_index), ...)
    parameter_count: int


@dataclass(frozen=True)
class SharingReport:
    total_parameters: int
    aliased_parameters: int
    aliased_groups: tuple  # groups used by both stacks
    cross_spectrum_positions: dict  # stack -> positions where spectra alias


def shared_parameter_report(net: KglNet) -> SharingReport:
    """Deterministic listing of parameter aliasing.

    ``aliased_groups`` lists only groups shared *between* the metric and
    descriptor stacks; positions where a single stack reuses one module for
    both spectra are reported separately under ``cross_spectrum_positions``.
    """
    users: dict = {}
    for (stack, spectrum, pos), key in net._stack_keys.items():
        users.setdefault(key, []).append((stack, spectrum, pos))

    def group_params(key: str) -> int:
        count = count_parameters(net.blocks[key])
        if key in net.attention:
            count += count_parameters(net.attention[key])
        return count

    aliased = []
    for key in sorted(users, key=lambda k: (min(p for _, _, p in users[k]), k)):
        stacks = {stack for stack, _, _ in users[key]}
        if len(stacks) > 1:
            aliased.append(
                AliasedGroup(
                    key=key,
                    positions=tuple(sorted(users[key])),
                    parameter_count=group_params(key),
                )
            )

    stacks_present = ("metric", "descriptor") if net.include_descriptor else ("metric",)
    cross_spectrum = {
        stack: tuple(
            pos
            for pos in range(1, N_BLOCKS + 1)
            if net.stack_key(stack, "a", pos) == net.stack_key(stack, "b", pos)
        )
        for stack in stacks_present
    }

    return SharingReport(
        total_parameters=count_parameters(net),
        aliased_parameters=sum(g.parameter_count for g in aliased),
        aliased_groups=tuple(aliased),
        cross_spectrum_positions=cross_spectrum,
    )
