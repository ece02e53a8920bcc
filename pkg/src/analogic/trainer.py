"""Minimax training loop, checkpoints, metrics log and inference."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .fog_synth import DatasetManifest, load_manifest, quantize_image
from .gist_core import DEFAULT_Z, Gist, ShapeError, interpolate_domain
from .networks import ArchConfig, ModelState, build_model, load_checkpoint, save_checkpoint
from .objectives import (
    GAN_FORMS,
    Batch,
    ForwardPass,
    LossWeights,
    build_feature_extractor,
    breakdown_record,
    discriminator_objective,
    generator_objective,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "gist_adv": ("use_gist_adv", ("w_gist_adv",)),
    "cyc": ("use_cyc", ("w_rec", "w_cyc_adv")),
    "percep": ("use_percep", ("w_percep",)),
    "dep": ("use_dep", ("w_dep",)),
    "sup": ("use_sup", ("w_sup",)),
}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term, step):
        super().__init__(f"non-finite value in loss term {term!r} at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 4
    steps: int = 4000
    width: int = 64
    height: int = 32
    base_width: int = 16
    n_res: int = 2
    n_down: int = 2
    gist_channels: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_gist_adv: bool = True
    use_cyc: bool = True
    use_percep: bool = True
    use_dep: bool = True
    use_sup: bool = True
    checkpoint_interval: int = 1000
    gan_form: str = "log"
    features: str = "random"
    deterministic: bool = True
    log_interval: int = 1

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps <= 0:
            raise ValueError(f"steps must be > 0, got {self.steps}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.checkpoint_interval <= 0:
            raise ValueError("checkpoint_interval must be > 0")
        if self.gan_form not in GAN_FORMS:
            raise ValueError(f"gan_form must be one of {GAN_FORMS}, got {self.gan_form!r}")
        self.arch().validate()

    def ablate(self, names):
        for n in names:
            if n not in ABLATIONS:
                raise ValueError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}")
            setattr(self, ABLATIONS[n][0], False)
        return self

    def effective_weights(self) -> LossWeights:
        w = asdict(self.weights)
        for flag, keys in ABLATIONS.values():
            if not getattr(self, flag):
                for k in keys:
                    w[k] = 0.0
        return LossWeights(**w)

    def arch(self) -> ArchConfig:
        return ArchConfig(width=self.base_width, n_res=self.n_res, n_down=self.n_down,
                          gist_channels=self.gist_channels, height=self.height, width_px=self.width, seed=self.seed)

    def to_json(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------- data


def _to_nchw(arrs, dtype):
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous().to(dtype)


@dataclass
class TrainingData:
    x_a: torch.Tensor
    x_ap: torch.Tensor
    d_s: torch.Tensor
    src_ids: list
    x_b: torch.Tensor
    d_t: torch.Tensor
    tgt_ids: list


def load_training_data(manifest: DatasetManifest, dtype=torch.float32) -> TrainingData:
    """Load the source pairs and target clear images. Never touches held-out entries."""
    src, tgt = manifest.source_pairs, manifest.target_train
    if not src:
        raise ValueError("manifest has no source training pairs")
    if not tgt:
        raise ValueError("manifest has no target training images")
    far = manifest.far

    def depth(e):
        return (manifest.load_depth(e) / far)[None]

    return TrainingData(
        x_a=_to_nchw([manifest.load_clear(e) for e in src], dtype),
        x_ap=_to_nchw([manifest.load_foggy(e) for e in src], dtype),
        d_s=torch.from_numpy(np.stack([depth(e) for e in src])).to(dtype),
        src_ids=[e.id for e in src],
        x_b=_to_nchw([manifest.load_clear(e) for e in tgt], dtype),
        d_t=torch.from_numpy(np.stack([depth(e) for e in tgt])).to(dtype),
        tgt_ids=[e.id for e in tgt],
    )


class PairedSampler:
    """Pairs one source pair with one target image per sample.

    An epoch has ``min(n_source, n_target)`` samples; both orders are
    reshuffled every epoch. The full sampler state round-trips through JSON.
    """

    def __init__(self, n_source, n_target, batch_size, seed):
        self.n_source, self.n_target = n_source, n_target
        self.batch_size = min(batch_size, n_source, n_target)
        self.rng = np.random.default_rng(seed)
        self.order_s = self.order_t = None
        self.pos = 0

    def _new_epoch(self):
        n = min(self.n_source, self.n_target)
        self.order_s = self.rng.permutation(self.n_source)[:n].tolist()
        self.order_t = self.rng.permutation(self.n_target)[:n].tolist()
        self.pos = 0

    def next(self):
        if self.order_s is None or self.pos + self.batch_size > len(self.order_s):
            self._new_epoch()
        sl = slice(self.pos, self.pos + self.batch_size)
        self.pos += self.batch_size
        return self.order_s[sl], self.order_t[sl]

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state, "order_s": self.order_s,
                "order_t": self.order_t, "pos": self.pos}

    def load_state_dict(self, d):
        self.rng.bit_generator.state = d["rng"]
        self.order_s, self.order_t, self.pos = d["order_s"], d["order_t"], d["pos"]


def make_batch(data: TrainingData, si, ti) -> Batch:
    return Batch(x_a=data.x_a[si], x_ap=data.x_ap[si], x_b=data.x_b[ti],
                 d_s=data.d_s[si], d_t=data.d_t[ti],
                 ids={"source": [data.src_ids[i] for i in si], "target": [data.tgt_ids[i] for i in ti]})


# ---------------------------------------------------------------- training


def _grad_norm(params):
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def _check_finite(terms, step):
    for k, v in terms.items():
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLoss(k, step)


def train_step(state: ModelState, batch: Batch, cfg: TrainConfig, phi, weights=None):
    """One discriminator update followed by one generator update.

    The two updates step disjoint parameter sets. Returns a metrics record.
    """
    w = weights or cfg.effective_weights()
    fp = ForwardPass(state, batch)
    t0 = time.perf_counter()

    disc_total, d_terms = discriminator_objective(state, batch, w, fp, cfg.gan_form)
    _check_finite(d_terms, state.step)
    state.opt_disc.zero_grad(set_to_none=True)
    gn_disc = 0.0
    if disc_total.requires_grad:
        disc_total.backward()
        gn_disc = _grad_norm(state.discriminator_parameters())
        state.opt_disc.step()

    gen_total, g_terms = generator_objective(state, batch, w, phi, fp, cfg.gan_form)
    _check_finite(g_terms, state.step)
    state.opt_gen.zero_grad(set_to_none=True)
    gn_gen = 0.0
    if gen_total.requires_grad:
        gen_total.backward()
        gn_gen = _grad_norm(state.generator_parameters())
        state.opt_gen.step()
    # the generator pass also deposits gradients on the discriminators
    state.opt_disc.zero_grad(set_to_none=True)

    record = {
        "step": state.step,
        "losses": breakdown_record({**g_terms, **d_terms}),
        "gen_total": float(gen_total.detach()),
        "disc_total": float(disc_total.detach()),
        "grad_norm_gen": gn_gen,
        "grad_norm_disc": gn_disc,
        "batch_ids": batch.ids,
        "wall_clock": time.perf_counter() - t0,
    }
    state.step += 1
    return state, record


def set_deterministic(flag=True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _rewrite_log_until(path, step):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(k + "\n" for k in keep))


def train(manifest, cfg: TrainConfig, out_dir, resume=None, data=None):
    """Run ``cfg.steps`` updates; returns the final checkpoint path.

    ``manifest`` may be a :class:`DatasetManifest` or a path. ``resume`` is a
    checkpoint written by an earlier call with the same config.
    """
    cfg.validate()
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if not manifest.source_pairs:
        raise ValueError("manifest has no source training pairs")
    if not manifest.target_train:
        raise ValueError("manifest has no target training images")
    set_deterministic(cfg.deterministic)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    arch = cfg.arch()
    data = data or load_training_data(manifest, arch.torch_dtype)
    if tuple(data.x_a.shape[2:]) != (cfg.height, cfg.width):
        raise ShapeError(f"dataset images are {tuple(data.x_a.shape[2:])}, config expects {(cfg.height, cfg.width)}")
    sampler = PairedSampler(len(data.src_ids), len(data.tgt_ids), cfg.batch_size, cfg.seed)
    log_path = out_dir / "metrics.jsonl"

    if resume is not None:
        state, extra = load_checkpoint(resume)
        sampler.load_state_dict(extra["sampler"])
        _rewrite_log_until(log_path, state.step)
    else:
        state = build_model(arch, lr=cfg.learning_rate, betas=cfg.betas)
        log_path.write_text("")
    state.config = cfg.to_json()
    state.config["manifest_far"] = manifest.far
    phi = build_feature_extractor(cfg.features, dtype=arch.torch_dtype)
    weights = cfg.effective_weights()

    ckpt = None
    with open(log_path, "a") as logf:
        while state.step < cfg.steps:
            si, ti = sampler.next()
            state, rec = train_step(state, make_batch(data, si, ti), cfg, phi, weights)
            if rec["step"] % cfg.log_interval == 0 or state.step == cfg.steps:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps:
                logf.flush()
                ckpt = save_checkpoint(state, out_dir / f"ckpt_{state.step}.analogic",
                                       extra={"sampler": sampler.state_dict()})
                log.info("step %d: checkpoint %s", state.step, ckpt)
    return ckpt


def read_metrics(path):
    with open(path) as f:
        return [json.loads(ln) for ln in f if ln.strip()]


# ---------------------------------------------------------------- inference


def as_state(checkpoint):
    if isinstance(checkpoint, ModelState):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


@torch.no_grad()
def predict_gists(state: ModelState, images, batch_size=64):
    """Forward gists for HxWx3 float images, returned as float64 numpy (N,H,W,3)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    H, W = state.arch.height, state.arch.width_px
    if images.shape[1:] != (H, W, 3):
        raise ShapeError(f"images are {images.shape[1:3]}, checkpoint expects {(H, W)}")
    Ms, Ns = [], []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size]).permute(0, 3, 1, 2).to(state.dtype)
        M, N, _ = state.gen_forward(x)
        Ms.append(M.permute(0, 2, 3, 1).double().numpy())
        Ns.append(N.permute(0, 2, 3, 1).double().numpy())
    return Gist(np.concatenate(Ms), np.concatenate(Ns))


def translate(checkpoint, images, z=DEFAULT_Z, out_paths=None):
    """Fog ``images`` with domainness ``z``; outputs are clamped to [0, 1].

    If ``out_paths`` is given, each result is also written as an 8-bit PNG.
    """
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"domainness z must lie in [0, 1], got {z}")
    state = as_state(checkpoint)
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    g = predict_gists(state, images)
    out = np.clip(interpolate_domain(images, g, z), 0.0, 1.0)
    if out_paths is not None:
        from .fog_synth import save_png

        for img, p in zip(out, out_paths):
            save_png(p, img)
    return out[0] if single else out


def quantized(images):
    return quantize_image(images).astype(np.float64) / 255.0
