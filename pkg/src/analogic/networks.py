"""Generator and discriminator modules plus the tied model state.

One generator serves both the source and the target translation of a
direction (A->A' and B->B' are the same module object), and its depth head
shares the whole trunk, so only the final layers differ between the gist
path and the depth path.
"""

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gist_core import Gist, ShapeError

CHECKPOINT_FORMAT = "analogic-ckpt/1"
_M_OFFSET = math.log(math.e - 1.0)  # softplus(0 + offset) == 1


@dataclass
class ArchConfig:
    width: int = 16
    n_down: int = 2
    n_res: int = 2
    stem_kernel: int = 7
    head_kernel: int = 3
    disc_width: int = 16
    disc_layers: int = 3
    disc_kernel: int = 4
    height: int = 32
    width_px: int = 64
    init_gain: float = 0.02
    seed: int = 0
    dtype: str = "float32"
    gist_channels: int = 1

    def validate(self):
        f = 2 ** self.n_down
        if self.height % f or self.width_px % f:
            raise ValueError(
                f"image size {self.width_px}x{self.height} is not divisible by the "
                f"downsampling factor {f} (n_down={self.n_down})"
            )
        if min(self.width, self.disc_width, self.disc_layers, self.stem_kernel, self.head_kernel) < 1:
            raise ValueError("architecture sizes must be positive")
        if self.n_down < 0 or self.n_res < 0:
            raise ValueError("n_down and n_res must be >= 0")
        if self.gist_channels not in (1, 3):
            raise ValueError(f"gist_channels must be 1 or 3, got {self.gist_channels}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def miniature_config(**kw) -> ArchConfig:
    """A few-hundred-parameter double precision model for gradient checks."""
    base = dict(width=1, n_down=1, n_res=0, stem_kernel=3, head_kernel=3, disc_width=1,
                disc_layers=1, disc_kernel=3, height=8, width_px=8, init_gain=0.5,
                dtype="float64")
    base.update(kw)
    return ArchConfig(**base)


def _pad_conv(cin, cout, k, bias=True):
    return [nn.ReflectionPad2d(k // 2), nn.Conv2d(cin, cout, k, bias=bias)]


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.block = nn.Sequential(
            *_pad_conv(c, c, 3, bias=False), nn.InstanceNorm2d(c), nn.ReLU(True),
            *_pad_conv(c, c, 3, bias=False), nn.InstanceNorm2d(c),
        )

    def forward(self, x):
        return x + self.block(x)


class TranslationGenerator(nn.Module):
    """ResNet-style encoder / transformer / decoder trunk with three heads.

    ``forward`` returns ``(M, N, depth)``: M > 0 via a shifted softplus,
    N in (-1, 1) via tanh, depth in (0, 1) (normalised by the far plane).
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        w = cfg.width
        layers = [*_pad_conv(3, w, cfg.stem_kernel, bias=False), nn.InstanceNorm2d(w), nn.ReLU(True)]
        c = w
        for _ in range(cfg.n_down):
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(cfg.n_res)]
        for _ in range(cfg.n_down):
            layers += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                       nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
            c //= 2
        self.trunk = nn.Sequential(*layers)
        k = cfg.head_kernel
        # with gist_channels=1 one map is shared by all colour channels
        self.m_head = nn.Sequential(*_pad_conv(c, cfg.gist_channels, k))
        self.n_head = nn.Sequential(*_pad_conv(c, cfg.gist_channels, k))
        self.depth_head = nn.Sequential(*_pad_conv(c, 1, k))
        self.height, self.width = cfg.height, cfg.width_px

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (self.height, self.width):
            raise ShapeError(
                f"generator expects (B, 3, {self.height}, {self.width}) input, got {tuple(x.shape)}"
            )

    def forward(self, x):
        self.check_input(x)
        h = self.trunk(x)
        M = F.softplus(self.m_head(h) + _M_OFFSET)
        N = torch.tanh(self.n_head(h))
        depth = torch.sigmoid(self.depth_head(h))
        if M.shape[1] == 1:
            M, N = M.expand(-1, 3, -1, -1), N.expand(-1, 3, -1, -1)
        return M, N, depth


class PatchDiscriminator(nn.Module):
    """PatchGAN critic returning a logit map."""

    def __init__(self, in_channels: int, cfg: ArchConfig):
        super().__init__()
        self.in_channels = in_channels
        k, w = cfg.disc_kernel, cfg.disc_width
        layers = [nn.Conv2d(in_channels, w, k, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        c = w
        for _ in range(cfg.disc_layers - 1):
            layers += [nn.Conv2d(c, 2 * c, k, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2, True)]
            c *= 2
        layers.append(nn.Conv2d(c, 1, k, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"discriminator expects {self.in_channels} input channels, got {tuple(x.shape)}"
            )
        return self.net(x)


def _init_weights(module, gain, generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=torch.float64) * gain)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class ModelState:
    arch: ArchConfig
    gen_forward: TranslationGenerator
    gen_backward: TranslationGenerator
    disc_gist_fwd: PatchDiscriminator
    disc_gist_bwd: PatchDiscriminator
    disc_target: PatchDiscriminator
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    step: int = 0
    config: dict = field(default_factory=dict)
    opt_gen: torch.optim.Optimizer = None
    opt_disc: torch.optim.Optimizer = None

    # the tied pairs are aliases of one module, not copies
    @property
    def G_AA(self):
        return self.gen_forward

    @property
    def G_BB(self):
        return self.gen_forward

    @property
    def G_AA_inv(self):
        return self.gen_backward

    @property
    def G_BB_inv(self):
        return self.gen_backward

    def modules(self):
        return {
            "gen_forward": self.gen_forward,
            "gen_backward": self.gen_backward,
            "disc_gist_fwd": self.disc_gist_fwd,
            "disc_gist_bwd": self.disc_gist_bwd,
            "disc_target": self.disc_target,
        }

    def generator_parameters(self):
        return list(self.gen_forward.parameters()) + list(self.gen_backward.parameters())

    def discriminator_parameters(self):
        return (list(self.disc_gist_fwd.parameters()) + list(self.disc_gist_bwd.parameters())
                + list(self.disc_target.parameters()))

    def named_parameters(self):
        for prefix, mod in self.modules().items():
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def parameter_count(self, which="all"):
        params = {"gen": self.generator_parameters(), "disc": self.discriminator_parameters(),
                  "all": [p for _, p in self.named_parameters()]}[which]
        return sum(p.numel() for p in params)

    @property
    def dtype(self):
        return self.arch.torch_dtype


def build_model(arch: ArchConfig, lr: float = 2e-4, betas=(0.5, 0.999)) -> ModelState:
    arch.validate()
    gen = torch.Generator().manual_seed(arch.seed)
    gf, gb = TranslationGenerator(arch), TranslationGenerator(arch)
    d_i, d_j, d_t = PatchDiscriminator(6, arch), PatchDiscriminator(6, arch), PatchDiscriminator(3, arch)
    for m in (gf, gb, d_i, d_j, d_t):
        _init_weights(m, arch.init_gain, gen)
        m.to(arch.torch_dtype)
    state = ModelState(arch, gf, gb, d_i, d_j, d_t, lr=lr, betas=tuple(betas))
    state.opt_gen = torch.optim.Adam(state.generator_parameters(), lr=lr, betas=tuple(betas))
    state.opt_disc = torch.optim.Adam(state.discriminator_parameters(), lr=lr, betas=tuple(betas))
    return state


def forward_gist(gen: TranslationGenerator, x) -> Gist:
    M, N, _ = gen(x)
    return Gist(M, N)


def forward_depth(gen: TranslationGenerator, x):
    return gen(x)[2]


def forward_disc(disc: PatchDiscriminator, inp):
    """Score map (logits). A :class:`Gist` is fed as the channel concat of M and N."""
    if isinstance(inp, Gist):
        inp = torch.cat([inp.M, inp.N], dim=1)
    return disc(inp)


# ---------------------------------------------------------------- checkpoints
#
# A checkpoint is an uncompressed numpy ``.npz`` archive. Keys:
#   "meta"                       uint8 bytes of a UTF-8 JSON document with
#                                format, step, arch, lr, betas, config, extra
#   "param/<module>.<name>"      parameter arrays, e.g.
#                                "param/gen_forward.trunk.1.weight"
#   "optim/<gen|disc>/<param>/<exp_avg|exp_avg_sq|step>"
#                                Adam moments keyed by the parameter's name
# Tied modules appear once; the aliases are not stored separately.


def _optim_groups(state):
    return {"gen": (state.opt_gen, ["gen_forward", "gen_backward"]),
            "disc": (state.opt_disc, ["disc_gist_fwd", "disc_gist_bwd", "disc_target"])}


def save_checkpoint(state: ModelState, path, extra=None):
    path = Path(path)
    arrays = {}
    named = dict(state.named_parameters())
    for name, p in named.items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    for key, (opt, _) in _optim_groups(state).items():
        for name, p in named.items():
            st = opt.state.get(p)
            if not st:
                continue
            for k, v in st.items():
                arrays[f"optim/{key}/{name}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "arch": asdict(state.arch),
        "lr": state.lr,
        "betas": list(state.betas),
        "config": state.config,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint_meta(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    return meta


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns ``(state, extra)``."""
    meta = read_checkpoint_meta(path)
    state = build_model(ArchConfig(**meta["arch"]), lr=meta["lr"], betas=tuple(meta["betas"]))
    state.step = int(meta["step"])
    state.config = meta["config"]
    named = dict(state.named_parameters())
    with np.load(path) as z:
        keys = set(z.files)
        with torch.no_grad():
            for name, p in named.items():
                key = f"param/{name}"
                if key not in keys:
                    raise ValueError(f"{path}: missing parameter {name}")
                p.copy_(torch.from_numpy(z[key]))
        for key, (opt, _) in _optim_groups(state).items():
            for name, p in named.items():
                prefix = f"optim/{key}/{name}/"
                sub = {k[len(prefix):]: z[k] for k in keys if k.startswith(prefix)}
                if sub:
                    opt.state[p] = {k: torch.from_numpy(v.copy()) for k, v in sub.items()}
    return state, meta["extra"]
