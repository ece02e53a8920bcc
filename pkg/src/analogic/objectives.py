"""Loss terms of the analogical translation model and their weighted sum.

Tensors are NCHW. Depth targets in a :class:`Batch` are normalised to
(0, 1] by the dataset's far plane, matching the sigmoid depth heads.

Every term can be evaluated on its own; :class:`ForwardPass` caches the
generator outputs so the full objective runs each generator once per input.
"""

from dataclasses import asdict, dataclass, field
from functools import cached_property

import torch
import torch.nn as nn
import torch.nn.functional as F

from .gist_core import Gist, ShapeError, apply_gist

LOG_EPS = 1e-7
GAN_FORMS = ("log", "least_squares")


@dataclass
class LossWeights:
    w_gist_adv: float = 3.0
    w_cyc_adv: float = 1.0
    w_sup: float = 10.0
    w_rec: float = 10.0
    w_dep: float = 10.0
    w_percep: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")

    @classmethod
    def zeros(cls, **kw):
        w = dict.fromkeys(asdict(cls()), 0.0)
        w.update(kw)
        return cls(**w)


@dataclass
class Batch:
    """Paired source clear/foggy images, an unpaired target clear image, depths.

    There is deliberately no field for a target foggy image.
    """

    x_a: torch.Tensor
    x_ap: torch.Tensor
    x_b: torch.Tensor
    d_s: torch.Tensor = None
    d_t: torch.Tensor = None
    ids: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x_a is None or self.x_ap is None:
            raise ValueError("batch needs the paired source images x_a and x_ap")
        if self.x_a.shape != self.x_ap.shape:
            raise ShapeError(f"source pair shapes differ: {tuple(self.x_a.shape)} vs {tuple(self.x_ap.shape)}")
        if self.x_b is not None and self.x_b.shape[1:] != self.x_a.shape[1:]:
            raise ShapeError(f"target image shape {tuple(self.x_b.shape)} differs from source {tuple(self.x_a.shape)}")
        for name in ("d_s", "d_t"):
            d = getattr(self, name)
            if d is not None and (d.dim() != 4 or d.shape[1] != 1 or d.shape[2:] != self.x_a.shape[2:]):
                raise ShapeError(f"{name} must be (B, 1, H, W), got {tuple(d.shape)}")

    def to(self, dtype):
        conv = lambda t: None if t is None else t.to(dtype)
        return Batch(conv(self.x_a), conv(self.x_ap), conv(self.x_b), conv(self.d_s), conv(self.d_t), self.ids)


# ---------------------------------------------------------------- features


class RandomConvFeatures(nn.Module):
    """Frozen, seed-fixed random conv stack used as the perceptual feature map."""

    def __init__(self, channels=(8, 16, 16, 32), seed=1234, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c = [], 3
        for i, co in enumerate(channels):
            conv = nn.Conv2d(c, co, 3, stride=2 if i % 2 else 1, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                                  * (2.0 / (c * 9)) ** 0.5)
                conv.bias.copy_(torch.randn(co, generator=gen, dtype=torch.float64) * 0.01)
            layers += [conv, nn.ReLU()]
            c = co
        self.net = nn.Sequential(*layers).to(dtype)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


class VGGFeatures(nn.Module):
    """VGG-16 truncated at relu4_3. Needs torchvision and, for real weights, a cached download."""

    def __init__(self, weights="DEFAULT", dtype=torch.float32):
        super().__init__()
        from torchvision.models import vgg16

        self.net = vgg16(weights=weights).features[:23].to(dtype)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406], dtype=dtype).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225], dtype=dtype).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


class IdentityFeatures(nn.Module):
    def forward(self, x):
        return x


def build_feature_extractor(kind="random", dtype=torch.float32, seed=1234):
    if kind == "random":
        return RandomConvFeatures(seed=seed, dtype=dtype)
    if kind == "vgg":
        return VGGFeatures(dtype=dtype)
    if kind == "identity":
        return IdentityFeatures()
    raise ValueError(f"unknown feature extractor {kind!r}")


# ---------------------------------------------------------------- adversarial forms


def disc_loss_from_logits(real, fake, form="log"):
    """Discriminator loss (minimised): real maps to 1, fake to 0."""
    if form == "log":
        p_real = torch.sigmoid(real).clamp(LOG_EPS, 1 - LOG_EPS)
        p_fake = torch.sigmoid(fake).clamp(LOG_EPS, 1 - LOG_EPS)
        return -(torch.log(p_real).mean() + torch.log(1 - p_fake).mean())
    if form == "least_squares":
        return ((real - 1) ** 2).mean() + (fake ** 2).mean()
    raise ValueError(f"unknown gan form {form!r}")


def gen_loss_from_logits(fake, form="log"):
    """Non-saturating generator loss: push fake toward the real label."""
    if form == "log":
        return -torch.log(torch.sigmoid(fake).clamp(LOG_EPS, 1 - LOG_EPS)).mean()
    if form == "least_squares":
        return ((fake - 1) ** 2).mean()
    raise ValueError(f"unknown gan form {form!r}")


def _gist_input(g: Gist, detach=False):
    t = torch.cat([g.M, g.N], dim=1)
    return t.detach() if detach else t


# ---------------------------------------------------------------- forward pass


class ForwardPass:
    """Lazily evaluated generator outputs for one batch.

    Naming: ``fwd_*`` come from the forward (clear -> foggy) generator,
    ``bwd_*`` from the backward one; ``x_bp`` is the generated target foggy
    image and ``x_b_rec`` its reconstruction.
    """

    def __init__(self, model, batch: Batch):
        self.model = model
        self.batch = batch

    @cached_property
    def fwd_a(self):
        return self.model.gen_forward(self.batch.x_a)

    @cached_property
    def fwd_b(self):
        return self.model.gen_forward(self.batch.x_b)

    @cached_property
    def bwd_ap(self):
        return self.model.gen_backward(self.batch.x_ap)

    @cached_property
    def bwd_bp(self):
        return self.model.gen_backward(self.x_bp)

    @property
    def gist_a(self):
        return Gist(*self.fwd_a[:2])

    @property
    def gist_b(self):
        return Gist(*self.fwd_b[:2])

    @property
    def gist_ap(self):
        return Gist(*self.bwd_ap[:2])

    @property
    def gist_bp(self):
        return Gist(*self.bwd_bp[:2])

    def run_joint(self):
        """Evaluate each generator once on the source and target inputs stacked.

        Instance normalisation is per sample, so this matches the separate calls.
        """
        if "fwd_a" in self.__dict__ or "fwd_b" in self.__dict__:
            return self
        b = self.batch
        n = b.x_a.shape[0]
        out = self.model.gen_forward(torch.cat([b.x_a, b.x_b]))
        self.fwd_a = tuple(t[:n] for t in out)
        self.fwd_b = tuple(t[n:] for t in out)
        out = self.model.gen_backward(torch.cat([b.x_ap, self.x_bp]))
        self.bwd_ap = tuple(t[:n] for t in out)
        self.bwd_bp = tuple(t[n:] for t in out)
        return self

    @cached_property
    def x_bp(self):
        return apply_gist(self.batch.x_b, self.gist_b)

    @cached_property
    def x_b_rec(self):
        return apply_gist(self.x_bp, self.gist_bp)


def _fp(model, batch, fp):
    return fp if fp is not None else ForwardPass(model, batch)


def _need_target(batch):
    if batch.x_b is None:
        raise ValueError("this loss needs the target clear image x_b")


# ---------------------------------------------------------------- loss terms


def supervised_loss(model, batch: Batch, fp=None):
    fp = _fp(model, batch, fp)
    fwd = F.l1_loss(apply_gist(batch.x_a, fp.gist_a), batch.x_ap)
    bwd = F.l1_loss(apply_gist(batch.x_ap, fp.gist_ap), batch.x_a)
    return fwd + bwd


def gist_adversarial_loss(model, batch: Batch, fp=None, form="log", parts=("disc", "gen")):
    """Returns ``(disc_loss, gen_loss)`` summed over both translation directions.

    Forward direction: D_I sees source gists of x_a as real and target gists of
    x_b as fake. Backward direction: D_J sees gists of x_a' as real and gists
    of the generated x_b' as fake.
    """
    _need_target(batch)
    fp = _fp(model, batch, fp)
    d_i, d_j = model.disc_gist_fwd, model.disc_gist_bwd
    disc = gen = None
    if "disc" in parts:
        disc = (disc_loss_from_logits(d_i(_gist_input(fp.gist_a, True)), d_i(_gist_input(fp.gist_b, True)), form)
                + disc_loss_from_logits(d_j(_gist_input(fp.gist_ap, True)), d_j(_gist_input(fp.gist_bp, True)), form))
    if "gen" in parts:
        gen = (gen_loss_from_logits(d_i(_gist_input(fp.gist_b)), form)
               + gen_loss_from_logits(d_j(_gist_input(fp.gist_bp)), form))
    return disc, gen


def cycle_loss(model, batch: Batch, fp=None, form="log", parts=("rec", "disc", "gen")):
    """Returns ``(rec_loss, disc_loss, gen_loss)`` for the target cycle x_b -> x_b' -> x_b."""
    _need_target(batch)
    fp = _fp(model, batch, fp)
    d_t = model.disc_target
    rec = disc = gen = None
    if "rec" in parts:
        rec = F.l1_loss(fp.x_b_rec, batch.x_b)
    if "disc" in parts:
        disc = disc_loss_from_logits(d_t(batch.x_b), d_t(fp.x_b_rec.detach()), form)
    if "gen" in parts:
        gen = gen_loss_from_logits(d_t(fp.x_b_rec), form)
    return rec, disc, gen


def perceptual_loss(model, batch: Batch, phi, fp=None):
    """L1 between the source feature delta phi(x_a') - phi(x_a) and the target one."""
    _need_target(batch)
    fp = _fp(model, batch, fp)
    with torch.no_grad():
        delta_s = phi(batch.x_ap) - phi(batch.x_a)
        phi_b = phi(batch.x_b)
    delta_t = phi(fp.x_bp) - phi_b
    return F.l1_loss(delta_t, delta_s)


def depth_loss(model, batch: Batch, fp=None):
    if batch.d_s is None or batch.d_t is None:
        raise ValueError("depth loss needs both d_s and d_t")
    _need_target(batch)
    fp = _fp(model, batch, fp)
    return (F.l1_loss(fp.fwd_a[2], batch.d_s) + F.l1_loss(fp.bwd_ap[2], batch.d_s)
            + F.l1_loss(fp.fwd_b[2], batch.d_t) + F.l1_loss(fp.bwd_bp[2], batch.d_t))


# ---------------------------------------------------------------- assembly

TERM_NAMES = ("sup", "gist_adv_gen", "gist_adv_disc", "rec", "cyc_adv_gen", "cyc_adv_disc", "dep", "percep")


def _uses_target(w: LossWeights):
    return any(v > 0 for k, v in asdict(w).items() if k != "w_sup")


def _zero(batch):
    return batch.x_a.new_zeros(())


def discriminator_objective(model, batch, w: LossWeights, fp=None, form="log"):
    """Weighted discriminator loss; generator outputs enter detached."""
    fp = _fp(model, batch, fp)
    if _uses_target(w):
        fp.run_joint()
    total, terms = _zero(batch), {"gist_adv_disc": 0.0, "cyc_adv_disc": 0.0}
    if w.w_gist_adv > 0:
        d, _ = gist_adversarial_loss(model, batch, fp, form, parts=("disc",))
        total = total + w.w_gist_adv * d
        terms["gist_adv_disc"] = d
    if w.w_cyc_adv > 0:
        _, d, _ = cycle_loss(model, batch, fp, form, parts=("disc",))
        total = total + w.w_cyc_adv * d
        terms["cyc_adv_disc"] = d
    return total, terms


def generator_objective(model, batch, w: LossWeights, phi, fp=None, form="log"):
    fp = _fp(model, batch, fp)
    if _uses_target(w):
        fp.run_joint()
    total = _zero(batch)
    terms = dict.fromkeys(("sup", "gist_adv_gen", "rec", "cyc_adv_gen", "dep", "percep"), 0.0)

    def add(name, weight, value):
        nonlocal total
        total = total + weight * value
        terms[name] = value

    if w.w_sup > 0:
        add("sup", w.w_sup, supervised_loss(model, batch, fp))
    if w.w_gist_adv > 0:
        add("gist_adv_gen", w.w_gist_adv, gist_adversarial_loss(model, batch, fp, form, parts=("gen",))[1])
    if w.w_rec > 0:
        add("rec", w.w_rec, cycle_loss(model, batch, fp, form, parts=("rec",))[0])
    if w.w_cyc_adv > 0:
        add("cyc_adv_gen", w.w_cyc_adv, cycle_loss(model, batch, fp, form, parts=("gen",))[2])
    if w.w_dep > 0:
        add("dep", w.w_dep, depth_loss(model, batch, fp))
    if w.w_percep > 0:
        add("percep", w.w_percep, perceptual_loss(model, batch, phi, fp))
    return total, terms


def full_objective(model, batch: Batch, w: LossWeights, phi, fp=None, form="log"):
    """Returns ``(gen_total, disc_total, breakdown)``.

    Terms whose weight is zero are not evaluated and report 0.0, so an
    ablated term contributes no gradient at all.
    """
    fp = _fp(model, batch, fp)
    disc_total, d_terms = discriminator_objective(model, batch, w, fp, form)
    gen_total, g_terms = generator_objective(model, batch, w, phi, fp, form)
    return gen_total, disc_total, breakdown_record({**g_terms, **d_terms})


def breakdown_record(terms):
    """Flat ``name -> float`` record in a stable key order."""
    return {k: float(torch.as_tensor(terms.get(k, 0.0)).detach()) for k in TERM_NAMES}
