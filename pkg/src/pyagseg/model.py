"""UNet segmentor with pyramid attention gates in the decoder.

Every decoder stage (bottleneck included) carries a gate: a 1x1 classifier
predicts a low-resolution softmax mask, whose background channel is used
to multiplicatively suppress feature activations before upsampling. The
stack of masks, plus the full-resolution prediction, forms a pyramid used
by the multi-scale consistency loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1

UPSAMPLE_MODES = ("nearest_conv", "transposed")
SELF_SUP_SCOPES = ("target_detach", "gates_and_encoder")
TARGET_DOWNSAMPLE_MODES = ("avgpool", "nearest")


@dataclass
class ModelConfig:
    depth: int = 4
    base_filters: int = 32
    classes: int = 4
    in_channels: int = 1
    upsample_mode: str = "nearest_conv"
    # gradient scope of the consistency objective: target_detach only stops
    # gradients through the full-resolution target; gates_and_encoder also
    # detaches the gate classifier inputs so the consistency signal updates
    # the gate classifiers alone
    self_sup_scope: str = "target_detach"
    target_downsample: str = "avgpool"

    def validate(self) -> "ModelConfig":
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.classes < 2:
            raise ValueError("classes must be >= 2 (background + foreground)")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.self_sup_scope not in SELF_SUP_SCOPES:
            raise ValueError(f"self_sup_scope must be one of {SELF_SUP_SCOPES}")
        if self.target_downsample not in TARGET_DOWNSAMPLE_MODES:
            raise ValueError(f"target_downsample must be one of {TARGET_DOWNSAMPLE_MODES}")
        return self


@dataclass
class PyramidPrediction:
    """Softmax maps per depth; maps[0] is the full-resolution prediction and
    maps[d] the auxiliary mask at depth d (spatial dims divided by 2^d)."""

    maps: list[torch.Tensor] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.maps)

    @property
    def final(self) -> torch.Tensor:
        return self.maps[0]

    def validate(self, tol: float = 1e-5) -> "PyramidPrediction":
        for d, m in enumerate(self.maps):
            if m.min() < -tol:
                raise ValueError(f"map {d} has negative probabilities")
            sums = m.sum(dim=-3)
            if (sums - 1.0).abs().max() > tol:
                raise ValueError(f"map {d} pixels do not sum to 1")
        return self


@dataclass
class GateInternals:
    """Pre-gate features, auxiliary mask and gated features of one gate."""

    depth: int
    features: torch.Tensor
    aux: torch.Tensor
    gated: torch.Tensor


def double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    """3x3 conv + batch norm + ReLU, twice."""
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class PyramidGate(nn.Module):
    """Attention gate: classify each location, then suppress background.

    The 1x1 classifier maps k feature channels to class scores; its softmax
    is the auxiliary mask. Features are rescaled by (1 - background
    probability), zeroing activations the gate assigns to background.
    """

    def __init__(self, channels: int, classes: int, detach_features: bool = False):
        super().__init__()
        self.classify = nn.Conv2d(channels, classes, kernel_size=1)
        self.detach_features = detach_features

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        inp = features.detach() if self.detach_features else features
        aux = torch.softmax(self.classify(inp), dim=1)
        gated = features * (1.0 - aux[:, :1])
        return aux, gated


class _Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, mode: str):
        super().__init__()
        if mode == "transposed":
            self.op = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        else:
            self.op = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(in_ch, out_ch, 3, padding=1),
            )

    def forward(self, x):
        return self.op(x)


class PyagUNet(nn.Module):
    """UNet encoder/decoder with a pyramid gate at every decoder stage.

    Encoder levels d = 0..D-1 double the filter count while halving
    resolution. The bottleneck output is gated directly; each shallower
    decoder stage upsamples the gated features, concatenates the encoder
    skip, applies a double conv and (for d >= 1) another gate. The depth-0
    head is the final double conv plus a 1x1 classifier with softmax.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d_max = config.depth
        widths = [config.base_filters * (2**d) for d in range(d_max)]

        self.encoders = nn.ModuleList()
        prev = config.in_channels
        for w in widths:
            self.encoders.append(double_conv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)

        detach = config.self_sup_scope == "gates_and_encoder"
        # gates live at depths 1..D-1; index d-1 in this list
        self.gates = nn.ModuleList(
            PyramidGate(widths[d], config.classes, detach_features=detach)
            for d in range(1, d_max)
        )
        # upsample from depth d+1 to d, then double conv after skip concat
        self.ups = nn.ModuleList(
            _Upsample(widths[d + 1], widths[d], config.upsample_mode)
            for d in range(d_max - 1)
        )
        self.decoders = nn.ModuleList(
            double_conv(widths[d] * 2, widths[d]) for d in range(d_max - 1)
        )
        self.classifier = nn.Conv2d(widths[0], config.classes, kernel_size=1)

    # --- parameter groups used by gradient-routing checks -----------------

    def encoder_parameters(self):
        return list(self.encoders.parameters())

    def gate_parameters(self):
        return list(self.gates.parameters())

    def head_parameters(self):
        """Depth-0 head: the final double conv and the output classifier."""
        return list(self.decoders[0].parameters()) + list(self.classifier.parameters())

    # ----------------------------------------------------------------------

    def forward(self, x: torch.Tensor, return_internals: bool = False):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        stride = 2 ** (cfg.depth - 1)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {stride}"
            )

        skips = []
        for d in range(cfg.depth):
            x = self.encoders[d](x)
            if d < cfg.depth - 1:
                skips.append(x)
                x = self.pool(x)

        aux_maps: dict[int, torch.Tensor] = {}
        internals: list[GateInternals] = []

        def gate_at(depth, feats):
            aux, gated = self.gates[depth - 1](feats)
            aux_maps[depth] = aux
            if return_internals:
                internals.append(GateInternals(depth, feats, aux, gated))
            return gated

        x = gate_at(cfg.depth - 1, x)
        for d in range(cfg.depth - 2, -1, -1):
            x = self.ups[d](x)
            x = torch.cat([x, skips[d]], dim=1)
            x = self.decoders[d](x)
            if d >= 1:
                x = gate_at(d, x)

        final = torch.softmax(self.classifier(x), dim=1)
        maps = [final] + [aux_maps[d] for d in range(1, cfg.depth)]
        pyramid = PyramidPrediction(maps=maps)
        if return_internals:
            return pyramid, internals
        return pyramid


def build_model(config: ModelConfig, seed: int = 0) -> PyagUNet:
    """Construct the segmentor with seed-deterministic initial parameters."""
    torch.manual_seed(seed)
    return PyagUNet(config)


def downsample_target(final: torch.Tensor, depth: int, mode: str = "avgpool") -> torch.Tensor:
    """Undersample the full-resolution prediction for use as a fixed target.

    avgpool averages 2^d x 2^d blocks and renormalises each pixel back onto
    the simplex; nearest keeps the top-left sample of each block. The result
    is detached: consumers never propagate gradients into the
    full-resolution stream.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if mode not in TARGET_DOWNSAMPLE_MODES:
        raise ValueError(f"mode must be one of {TARGET_DOWNSAMPLE_MODES}")
    factor = 2**depth
    if mode == "avgpool":
        t = F.avg_pool2d(final, factor)
        t = t / t.sum(dim=1, keepdim=True).clamp_min(1e-12)
    else:
        t = final[..., ::factor, ::factor]
    return t.detach()


def save_checkpoint(
    path,
    model: PyagUNet,
    step: int = 0,
    optimizer=None,
    best_val_dice: float | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "step": step,
        "best_val_dice": best_val_dice,
        "rng_state": rng_state or {},
        "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "version" not in payload:
        raise ValueError(f"{path}: not a checkpoint (missing version field)")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def model_from_checkpoint(payload: dict) -> PyagUNet:
    config = ModelConfig(**payload["model_config"])
    model = PyagUNet(config)
    model.load_state_dict(payload["model_state"])
    return model
