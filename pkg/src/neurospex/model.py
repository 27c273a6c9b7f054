"""NeuroSpex network: speech encoder, EEG encoder, speaker extractor, speech decoder.

All layers work on ``[batch, channels, time]`` tensors. Unbatched inputs
(``[T_s]`` audio, ``[64, T_y]`` EEG) are accepted by :meth:`NeuroSpexNet.forward`
and returned unbatched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffkernels as dk
from .diffkernels import Module, Parameter, Tensor, constant, uniform_fan_in
from .signals import AUDIO_RATE, EEG_RATE, AudioSignal, EEGRecording

EEG_VARIANTS = ("adc", "sa", "conv", "direct")
FUSION_VARIANTS = ("ca", "direct")


@dataclass
class ModelConfig:
    n_x: int = 256
    enc_kernel: int = 20
    n_y: int = 64
    adc_blocks: int = 6
    heads: int = 2
    dconv_kernel: int = 10
    ca_tcn_repeats: int = 4
    tcn_units_per_repeat: int = 8
    tcn_hidden: int = 512
    tcn_kernel: int = 3
    dec_frame: int = 20
    ca_heads: int = 1
    preconv_kernel: int = 3
    eeg_variant: str = "adc"
    fusion_variant: str = "ca"
    toy_scale: bool = False
    segment_s: float = 4.0

    def __post_init__(self):
        if self.eeg_variant not in EEG_VARIANTS:
            raise ValueError(f"unknown EEG encoder variant {self.eeg_variant!r}; expected one of {EEG_VARIANTS}")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion_variant!r}; expected one of {FUSION_VARIANTS}")
        if self.enc_kernel % 2 or self.dec_frame % 2:
            raise ValueError("encoder kernel and decoder frame must be even")
        if self.eeg_variant in ("adc", "sa") and self.n_y % self.heads:
            raise ValueError(f"n_y={self.n_y} not divisible by heads={self.heads}")
        if self.fusion_variant == "ca" and self.n_x % self.ca_heads:
            raise ValueError(f"n_x={self.n_x} not divisible by ca_heads={self.ca_heads}")
        if self.eeg_variant != "direct" and self.adc_blocks < 1:
            raise ValueError("adc/sa/conv variants need at least one block")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """0.5 s segments, N_x = 64, 2 EEG blocks, 2 extractor repeats of 4 TCN units."""
        base = dict(n_x=64, adc_blocks=2, ca_tcn_repeats=2, tcn_units_per_repeat=4, tcn_hidden=128, toy_scale=True, segment_s=0.5)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def enc_stride(self) -> int:
        return self.enc_kernel // 2

    @property
    def dec_hop(self) -> int:
        return self.dec_frame // 2

    @property
    def audio_len(self) -> int:
        return int(round(self.segment_s * AUDIO_RATE))

    @property
    def eeg_len(self) -> int:
        return int(round(self.segment_s * EEG_RATE))


# -- layers --------------------------------------------------------------------

class Pointwise(Module):
    """1x1 convolution (a per-frame linear map)."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        self.weight = uniform_fan_in(rng, (c_out, c_in), c_in, dtype)
        self.bias = uniform_fan_in(rng, (c_out,), c_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return dk.linear_map(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, dtype):
        self.gamma = constant((channels,), 1.0, dtype)
        self.beta = constant((channels,), 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return dk.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, d_query: int, d_kv: int, d_model: int, d_out: int, heads: int, rng, dtype):
        self.heads = heads
        self.wq = uniform_fan_in(rng, (d_model, d_query), d_query, dtype)
        self.bq = uniform_fan_in(rng, (d_model,), d_query, dtype)
        self.wk = uniform_fan_in(rng, (d_model, d_kv), d_kv, dtype)
        self.bk = uniform_fan_in(rng, (d_model,), d_kv, dtype)
        self.wv = uniform_fan_in(rng, (d_model, d_kv), d_kv, dtype)
        self.bv = uniform_fan_in(rng, (d_model,), d_kv, dtype)
        self.wo = uniform_fan_in(rng, (d_out, d_model), d_model, dtype)
        self.bo = uniform_fan_in(rng, (d_out,), d_model, dtype)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        return dk.multi_head_attention(q_in, kv_in, self.heads, self.params())


class DepthwiseConv(Module):
    """Length-preserving depthwise convolution; even kernels pad one more on the left."""

    def __init__(self, channels: int, kernel: int, rng, dtype, dilation: int = 1):
        self.dilation = dilation
        self.kernel = kernel
        self.weight = uniform_fan_in(rng, (channels, kernel), kernel, dtype)
        self.bias = uniform_fan_in(rng, (channels,), kernel, dtype)

    @property
    def pads(self) -> tuple[int, int]:
        total = self.dilation * (self.kernel - 1)
        return total - total // 2, total // 2

    def __call__(self, x: Tensor) -> Tensor:
        left, right = self.pads
        return dk.depthwise_conv1d(x, self.weight, self.bias, left, right, self.dilation)


class AdCBlock(Module):
    """Self-attention sublayer then depthwise-conv sublayer, each residual + layer norm.

    ``mode`` drops one sublayer for the ablation variants: ``"sa"`` keeps only
    attention, ``"conv"`` keeps only the convolution.
    """

    def __init__(self, channels: int, heads: int, kernel: int, rng, dtype, mode: str = "adc"):
        self.mode = mode
        if mode in ("adc", "sa"):
            self.mha = Attention(channels, channels, channels, channels, heads, rng, dtype)
            self.ln_mha = LayerNorm(channels, dtype)
        if mode in ("adc", "conv"):
            self.dconv = DepthwiseConv(channels, kernel, rng, dtype)
            self.ln_dconv = LayerNorm(channels, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        if self.mode in ("adc", "sa"):
            y = self.ln_mha(self.mha(y, y) + y)
        if self.mode in ("adc", "conv"):
            y = self.ln_dconv(self.dconv(y) + y)
        return y


class EEGEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.variant = cfg.eeg_variant
        self.blocks = []
        if self.variant == "direct":
            return
        k = cfg.preconv_kernel
        self.pre_weight = uniform_fan_in(rng, (cfg.n_y, cfg.n_y, k), cfg.n_y * k, dtype)
        self.pre_bias = uniform_fan_in(rng, (cfg.n_y,), cfg.n_y * k, dtype)
        self.blocks = [AdCBlock(cfg.n_y, cfg.heads, cfg.dconv_kernel, rng, dtype, mode=self.variant) for _ in range(cfg.adc_blocks)]

    def preconv(self, y: Tensor) -> Tensor:
        k = self.pre_weight.shape[-1]
        return dk.conv1d(y, self.pre_weight, self.pre_bias, 1, (k - 1) // 2, k // 2)

    def __call__(self, y: Tensor) -> Tensor:
        if self.variant == "direct":
            return y
        out = self.preconv(y)
        for block in self.blocks:
            out = block(out)
        return out


class CrossAttentionFusion(Module):
    """Query from the EEG reference, key/value from the speech embedding; residual + LN on the speech side."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.attn = Attention(cfg.n_y, cfg.n_x, cfg.n_x, cfg.n_x, cfg.ca_heads, rng, dtype)
        self.ln = LayerNorm(cfg.n_x, dtype)

    def __call__(self, x: Tensor, ref: Tensor) -> Tensor:
        if x.shape[-1] != ref.shape[-1]:
            raise ValueError(f"cross attention: time lengths differ ({x.shape[-1]} vs {ref.shape[-1]})")
        return self.ln(self.attn(ref, x) + x)


class DirectFusion(Module):
    """Channel concatenation followed by a learned 1x1 convolution back to N_x."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.proj = Pointwise(cfg.n_x + cfg.n_y, cfg.n_x, rng, dtype)

    def __call__(self, x: Tensor, ref: Tensor) -> Tensor:
        if x.shape[-1] != ref.shape[-1]:
            raise ValueError(f"direct fusion: time lengths differ ({x.shape[-1]} vs {ref.shape[-1]})")
        return self.proj(dk.concat([x, ref], axis=-2))


class TCNUnit(Module):
    """1x1 up-projection, PReLU, LN, dilated depthwise conv, PReLU, LN, 1x1 down-projection; residual."""

    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int, rng, dtype):
        self.conv_in = Pointwise(channels, hidden, rng, dtype)
        self.slope1 = constant((hidden,), 0.25, dtype)
        self.ln1 = LayerNorm(hidden, dtype)
        self.dconv = DepthwiseConv(hidden, kernel, rng, dtype, dilation=dilation)
        self.slope2 = constant((hidden,), 0.25, dtype)
        self.ln2 = LayerNorm(hidden, dtype)
        self.conv_out = Pointwise(hidden, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(dk.prelu(self.conv_in(x), self.slope1))
        h = self.ln2(dk.prelu(self.dconv(h), self.slope2))
        return x + self.conv_out(h)


class TCN(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.units = [
            TCNUnit(cfg.n_x, cfg.tcn_hidden, cfg.tcn_kernel, 2**i, rng, dtype) for i in range(cfg.tcn_units_per_repeat)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


# -- network -------------------------------------------------------------------

class NeuroSpexNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.Philox(seed))
        k = cfg.enc_kernel
        self.enc_weight = uniform_fan_in(rng, (cfg.n_x, 1, k), k, dtype)
        self.enc_bias = uniform_fan_in(rng, (cfg.n_x,), k, dtype)
        self.eeg_encoder = EEGEncoder(cfg, rng, dtype)
        fusion = CrossAttentionFusion if cfg.fusion_variant == "ca" else DirectFusion
        self.fusions = [fusion(cfg, rng, dtype) for _ in range(cfg.ca_tcn_repeats)]
        self.tcns = [TCN(cfg, rng, dtype) for _ in range(cfg.ca_tcn_repeats)]
        self.mask_head = Pointwise(cfg.n_x, cfg.n_x, rng, dtype)
        self.dec_weight = uniform_fan_in(rng, (cfg.dec_frame, cfg.n_x), cfg.n_x, dtype)
        self.dec_bias = constant((cfg.dec_frame,), 0.0, dtype)  # zero mask gives a silent output at init
        self.name_parameters()

    # -- stages --------------------------------------------------------------
    def speech_encode(self, x: Tensor) -> Tensor:
        """``[B, 1, T_s] -> [B, N_x, T_s / (K/2)]``.

        Padding K/2 on both sides and keeping the first T_s/(K/2) frames is the
        same as padding only on the left, which is what is computed.
        """
        stride = self.config.enc_stride
        if x.shape[-1] % stride:
            raise ValueError(f"input length {x.shape[-1]} is not a multiple of {stride}: pad input to hop multiple")
        return dk.relu(dk.conv1d(x, self.enc_weight, self.enc_bias, stride=stride, pad_left=stride, pad_right=0))

    def eeg_encode(self, y: Tensor) -> Tensor:
        return self.eeg_encoder(y)

    def interpolate_reference(self, y: Tensor, t_x: int) -> Tensor:
        return dk.linear_interpolate_time(y, t_x)

    def cross_attend(self, x: Tensor, ref: Tensor, repeat: int = 0) -> Tensor:
        if self.config.fusion_variant != "ca":
            raise RuntimeError("model was built with direct fusion")
        return self.fusions[repeat](x, ref)

    def fuse_direct(self, x: Tensor, ref: Tensor, repeat: int = 0) -> Tensor:
        if self.config.fusion_variant != "direct":
            raise RuntimeError("model was built with cross-attention fusion")
        return self.fusions[repeat](x, ref)

    def extract_mask(self, x: Tensor, y: Tensor) -> Tensor:
        """Mask from speech embedding ``x`` and encoded EEG ``y`` (interpolated here)."""
        ref = self.interpolate_reference(y, x.shape[-1])
        z = x
        for fuse, tcn in zip(self.fusions, self.tcns):
            z = tcn(fuse(z, ref))
        return dk.relu(self.mask_head(z))

    @staticmethod
    def apply_mask(x: Tensor, mask: Tensor) -> Tensor:
        if x.shape != mask.shape:
            raise ValueError(f"mask shape {mask.shape} != embedding shape {x.shape}")
        return dk.mul(x, mask)

    def decode(self, s: Tensor) -> Tensor:
        """Per-frame linear map to L samples, overlap-add at L/2, drop the leading L/2 samples.

        The dropped half frame mirrors the encoder's left padding so that output
        frame ``t`` lines up with the input samples encoder frame ``t`` saw.
        """
        hop = self.config.dec_hop
        frames = dk.linear_map(s, self.dec_weight, self.dec_bias)
        wave = dk.overlap_add(frames, hop)
        t_s = s.shape[-1] * hop
        return dk.crop(wave, hop, hop + t_s)

    # -- end to end -----------------------------------------------------------
    def _prepare(self, x, y) -> tuple[Tensor, Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=self.dtype))
        single = x.ndim == 1
        if single:
            x = dk.reshape(x, (1, 1, x.shape[0]))
            y = dk.reshape(y, (1,) + y.shape)
        elif x.ndim == 2:
            x = dk.reshape(x, (x.shape[0], 1, x.shape[1]))
        if y.ndim != 3 or y.shape[0] != x.shape[0] or y.shape[1] != self.config.n_y:
            raise ValueError(f"EEG batch {y.shape} does not match audio batch {x.shape} / {self.config.n_y} channels")
        return x, y, single

    def forward_intermediates(self, x, y) -> dict[str, Tensor]:
        x, y, single = self._prepare(x, y)
        enc = self.speech_encode(x)
        ref = self.eeg_encode(y)
        mask = self.extract_mask(enc, ref)
        masked = self.apply_mask(enc, mask)
        wave = self.decode(masked)
        if single:
            wave = dk.reshape(wave, (wave.shape[-1],))
        return {"X": enc, "Y": ref, "Y_interp": self.interpolate_reference(ref, enc.shape[-1]), "M": mask, "S": masked, "s": wave}

    def forward(self, x, y) -> Tensor:
        x, y, single = self._prepare(x, y)
        enc = self.speech_encode(x)
        mask = self.extract_mask(enc, self.eeg_encode(y))
        wave = self.decode(self.apply_mask(enc, mask))
        if single:
            wave = dk.reshape(wave, (wave.shape[-1],))
        return wave

    __call__ = forward

    def extract(self, mixture: AudioSignal, eeg: EEGRecording) -> AudioSignal:
        if mixture.sample_rate != AUDIO_RATE or eeg.sample_rate != EEG_RATE:
            raise ValueError("expected 8 kHz audio and 128 Hz EEG")
        with dk.no_grad():
            out = self.forward(mixture.samples, eeg.data)
        return AudioSignal(out.data.astype(np.float64), AUDIO_RATE)

    def astype(self, dtype) -> "NeuroSpexNet":
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(net: NeuroSpexNet, stem: str | Path, extra: dict | None = None) -> None:
    meta = {"model_config": net.config.to_dict()}
    if extra:
        meta.update(extra)
    dk.save_arrays(stem, net.state_dict(), meta)


def load_checkpoint(stem: str | Path, dtype=np.float32) -> tuple[NeuroSpexNet, dict]:
    arrays, meta = dk.load_arrays(stem)
    net = NeuroSpexNet(ModelConfig.from_dict(meta["model_config"]), dtype=dtype)
    net.load_state_dict(arrays)
    return net, meta


def parameter_count(cfg: ModelConfig, part: str | None = None) -> int:
    net = NeuroSpexNet(cfg)
    if part is None:
        return net.num_parameters()
    return int(sum(p.data.size for name, p in net.named_parameters() if name.startswith(part)))


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
